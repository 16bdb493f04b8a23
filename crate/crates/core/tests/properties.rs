use proptest::prelude::*;

use headlab::data::{batches, caffe_preprocess, hflip, vflip};
use headlab::heads::{build_head, head_forward, head_param_count, FeatureMapSpec, HeadKind, HeadSpec};
use headlab::nn::{conv2d_forward, valid_out, Mode};
use headlab::optim::LrSchedule;
use headlab::train::topk_hits;
use headlab::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-100.0f32..300.0, h * w * c).prop_map(move |d| Tensor::new([h, w, c], d).unwrap())
}

fn sized_image() -> impl Strategy<Value = Tensor<f32>> {
    (1usize..7, 1usize..7, prop_oneof![Just(1usize), Just(3)]).prop_flat_map(|(h, w, c)| image(h, w, c))
}

fn head_kind() -> impl Strategy<Value = HeadKind> {
    prop::sample::select(HeadKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flips_are_involutions(img in sized_image()) {
        prop_assert_eq!(hflip(&hflip(&img).unwrap()).unwrap(), img.clone());
        prop_assert_eq!(vflip(&vflip(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn caffe_is_affine(a in image(3, 4, 3), b in image(3, 4, 3)) {
        let pa = caffe_preprocess(&a).unwrap();
        let pb = caffe_preprocess(&b).unwrap();
        let sum = a.add(&b).unwrap();
        let psum = caffe_preprocess(&sum).unwrap();
        let offset = caffe_preprocess(&Tensor::zeros([3, 4, 3]).unwrap()).unwrap();
        // P(a + b) = P(a) + P(b) - P(0)
        let rhs = pa.add(&pb).unwrap().sub(&offset).unwrap();
        for (x, y) in psum.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() <= 1e-3 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn batches_cover_each_index_once(len in 0usize..200, bs in 1usize..40, seed: u64, epoch in 0usize..50) {
        let b = batches(len, bs, seed, epoch).unwrap();
        prop_assert!(b.iter().all(|chunk| !chunk.is_empty() && chunk.len() <= bs));
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn lr_is_non_increasing(initial in 1e-4f64..1.0, decay in 0.01f64..=1.0, period in 1usize..6, e in 0usize..200) {
        let s = LrSchedule { initial, decay, period_epochs: period };
        prop_assert!(s.lr_at(e + 1) <= s.lr_at(e));
        prop_assert!(s.lr_at(e) > 0.0);
    }

    #[test]
    fn top1_never_exceeds_topk(
        logits in prop::collection::vec(-5.0f64..5.0, 24),
        labels in prop::collection::vec(0usize..6, 4),
        k in 1usize..=6,
    ) {
        let t = Tensor::new([4, 6], logits).unwrap();
        let (h1, hk) = topk_hits(&t, &labels, k).unwrap();
        let (h1b, _) = topk_hits(&t, &labels, 1).unwrap();
        prop_assert_eq!(h1, h1b);
        prop_assert!(h1 <= hk && hk <= 4);
        if k == 6 {
            prop_assert_eq!(hk, 4);
        }
    }

    #[test]
    fn conv_output_side_matches_valid_padding(side in 1usize..16, kernel in 1usize..5, stride in 1usize..4) {
        let x = Tensor::<f64>::zeros([1, side, side, 2]).unwrap();
        let k = Tensor::<f64>::zeros([kernel, kernel, 2, 3]).unwrap();
        match (conv2d_forward(&x, &k, None, stride), valid_out(side, kernel, stride)) {
            (Ok(y), Some(o)) => {
                prop_assert_eq!(o, (side - kernel) / stride + 1);
                prop_assert_eq!(y.dims(), &[1, o, o, 3][..]);
            }
            (Err(_), None) => prop_assert!(kernel > side),
            (y, o) => prop_assert!(false, "conv {:?} vs formula {:?}", y.map(|t| t.dims().to_vec()), o),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn closed_form_count_matches_allocation(
        kind in head_kind(),
        h in 1usize..10,
        w in 1usize..10,
        c in 1usize..9,
        classes in 1usize..12,
        pool in 1usize..4,
    ) {
        let fm = FeatureMapSpec::new(h, w, c).unwrap();
        let mut spec = HeadSpec::new(kind, classes);
        if kind.uses_pool() {
            spec = spec.with_pool(pool);
        }
        match build_head::<f32>(&fm, &spec, 9) {
            Ok(p) => prop_assert_eq!(head_param_count(&fm, &spec).unwrap(), p.allocated_count() as u64),
            Err(_) => prop_assert!(head_param_count(&fm, &spec).is_err()),
        }
    }

    #[test]
    fn channel_wise_heads_commute_with_channel_permutation(
        kind in prop::sample::select(vec![HeadKind::Gap, HeadKind::Dw, HeadKind::DwNonneg, HeadKind::AvgDwNonneg]),
        seed: u64,
        shift in 1usize..4,
    ) {
        let (h, w, c, k) = (4, 4, 4, 3);
        let fm = FeatureMapSpec::new(h, w, c).unwrap();
        let mut spec = HeadSpec::new(kind, k);
        if kind.uses_pool() {
            spec = spec.with_pool(2);
        }
        let head = build_head::<f64>(&fm, &spec, seed).unwrap();
        let perm: Vec<usize> = (0..c).map(|i| (i + shift) % c).collect();

        let mut permuted = head.clone();
        for (_, t, _) in permuted.tensors_mut() {
            if t.dims().last() == Some(&c) && t.rank() >= 1 && t.dims() != [c, k] {
                *t = permute_last(t, &perm);
            }
        }
        let fc = head.fc_weight.data();
        let mut fc_p = vec![0.0; c * k];
        for (new, &old) in perm.iter().enumerate() {
            fc_p[new * k..(new + 1) * k].copy_from_slice(&fc[old * k..(old + 1) * k]);
        }
        permuted.fc_weight = Tensor::new([c, k], fc_p).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..2 * h * w * c).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
        let x = Tensor::new([2, h, w, c], data).unwrap();
        let a = head_forward(&x, &head, &spec, Mode::Infer, &mut rng).unwrap();
        let b = head_forward(&permute_last(&x, &perm), &permuted, &spec, Mode::Infer, &mut rng).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}

/// New channel `j` takes old channel `perm[j]`.
fn permute_last(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = perm.len();
    let mut out = t.data().to_vec();
    for (row_out, row_in) in out.chunks_mut(c).zip(t.data().chunks(c)) {
        for (j, &p) in perm.iter().enumerate() {
            row_out[j] = row_in[p];
        }
    }
    Tensor::new(t.dims().to_vec(), out).unwrap()
}
