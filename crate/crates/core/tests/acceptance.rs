//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use headlab::autodiff::suite::{run_suite, SUITE_STEP, SUITE_TOL};
use headlab::autodiff::DIFFERENTIABLE_OPS;
use headlab::backbone::{feature_map_spec, registry_lookup, SmallBackboneSpec};
use headlab::config::TrainConfig;
use headlab::gradcam::{grad_cam, heatmap_pixels};
use headlab::heads::{build_head, head_forward, FeatureMapSpec, HeadKind, HeadParams, HeadSpec, SpatialParams};
use headlab::model::Model;
use headlab::nn::{Constraint, Mode};
use headlab::optim::{sgd_step, LrSchedule, ParamMut, SgdState};
use headlab::reference::PUBLISHED_COUNTS;
use headlab::train;
use headlab::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: impl Into<String>, bad: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(bad.into())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("{what} took {elapsed:?}, limit {limit:?}"))
    }
}

fn parameter_table() -> Outcome {
    let start = Instant::now();
    let mut wrong = Vec::new();
    for row in PUBLISHED_COUNTS {
        let (_, _, total) = row.reproduce().map_err(|e| e.to_string())?;
        if total != row.expected {
            wrong.push(format!(
                "{} {} {}: {total} != {}",
                row.table, row.backbone, row.head, row.expected
            ));
        }
    }
    within(start.elapsed(), Duration::from_secs(1), "table")?;
    check(
        wrong.is_empty(),
        format!("{} published counts reproduced exactly", PUBLISHED_COUNTS.len()),
        wrong.join("; "),
    )
}

fn head_geometry() -> Outcome {
    let e = registry_lookup("resnet50").map_err(|e| e.to_string())?;
    let fm224 = feature_map_spec(&e, 224).map_err(|e| e.to_string())?;
    let fm512 = feature_map_spec(&e, 512).map_err(|e| e.to_string())?;
    let k = |fm: &FeatureMapSpec, pool| -> Result<Vec<usize>, String> {
        let spec = HeadSpec::new(HeadKind::AvgDwNonneg, 10).with_pool(pool);
        let small = FeatureMapSpec::new(fm.height, fm.width, 2).unwrap();
        let p: HeadParams<f32> = build_head(&small, &spec, 0).map_err(|e| e.to_string())?;
        match p.spatial {
            SpatialParams::Depthwise(dw) => Ok(dw.kernel.dims()[..2].to_vec()),
            _ => Err("no depthwise stage".into()),
        }
    };
    let got = (
        (fm224.height, fm224.width),
        k(&fm224, 2)?,
        (fm512.height, fm512.width),
        k(&fm512, 3)?,
    );
    check(
        got == ((7, 7), vec![3, 3], (16, 16), vec![5, 5]),
        "224→7x7, pool 2→3x3 kernel; 512→16x16, pool 3→5x5 kernel",
        format!("got {got:?}"),
    )
}

fn gradient_suite() -> Outcome {
    let report = run_suite(None).map_err(|e| e.to_string())?;
    within(report.elapsed, Duration::from_secs(60), "gradient suite")?;
    let missing: Vec<&str> = DIFFERENTIABLE_OPS
        .iter()
        .copied()
        .filter(|op| !report.entries.iter().any(|e| e.name == *op))
        .collect();
    let heads = HeadKind::ALL
        .iter()
        .filter(|k| report.entries.iter().any(|e| e.name == format!("head:{}", k.name())))
        .count();
    if !missing.is_empty() || heads != 9 || SUITE_STEP != 1e-3 || SUITE_TOL != 1e-4 {
        return Err(format!("coverage: missing ops {missing:?}, {heads} heads"));
    }
    let worst = report.worst().map_or(0.0, |w| w.report.max_rel_error);
    check(
        report.pass(),
        format!(
            "{} checks (all ops, 9 heads, backbone) pass, worst rel err {worst:.2e}, {:.2}s",
            report.entries.len(),
            report.elapsed.as_secs_f64()
        ),
        format!(
            "failing: {:?}",
            report.failures().iter().map(|e| &e.name).collect::<Vec<_>>()
        ),
    )
}

fn gap_subsumption() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fm = FeatureMapSpec::new(5, 6, 8).unwrap();
    let classes = 6;
    let gap: HeadParams<f32> = build_head(&fm, &HeadSpec::new(HeadKind::Gap, classes), 1).unwrap();
    let mut dw: HeadParams<f32> = build_head(&fm, &HeadSpec::new(HeadKind::Dw, classes), 1).unwrap();
    let SpatialParams::Depthwise(stage) = &mut dw.spatial else {
        return Err("dw head without depthwise stage".into());
    };
    stage.kernel = Tensor::full([5, 6, 8], 1.0 / 30.0).unwrap();
    stage.bias = Some(Tensor::zeros([8]).unwrap());
    dw.fc_weight = gap.fc_weight.clone();
    dw.fc_bias = Tensor::new([classes], (0..classes).map(|i| i as f32 * 0.1).collect()).unwrap();
    let gap = HeadParams {
        fc_bias: dw.fc_bias.clone(),
        ..gap
    };
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let data = (0..5 * 6 * 8).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let x = Tensor::new([1, 5, 6, 8], data).unwrap();
        let a = head_forward(&x, &gap, &HeadSpec::new(HeadKind::Gap, classes), Mode::Infer, &mut rng).unwrap();
        let b = head_forward(&x, &dw, &HeadSpec::new(HeadKind::Dw, classes), Mode::Infer, &mut rng).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            worst = worst.max((u - v).abs());
        }
    }
    check(
        worst <= 1e-6,
        format!("max |Δlogit| = {worst:.2e} over 100 maps (f32)"),
        format!("max |Δlogit| = {worst:.2e} > 1e-6"),
    )
}

fn non_negativity() -> Outcome {
    let fm = FeatureMapSpec::new(3, 3, 4).unwrap();
    let spec = HeadSpec::new(HeadKind::DwNonneg, 3);
    let mut head: HeadParams<f64> = build_head(&fm, &spec, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut state = SgdState::new(head.tensors().into_iter().map(|(_, t, _)| t), 0.9, 0.045);
    let mut min_seen = f64::INFINITY;
    for step in 0..200 {
        let mut grads = Vec::new();
        for (_, t, _) in head.tensors() {
            let data = (0..t.len()).map(|_| rng.random_range(0.5..20.0)).collect();
            grads.push(Tensor::new(t.dims().to_vec(), data).unwrap());
        }
        let grad_refs: Vec<&Tensor<f64>> = grads.iter().collect();
        let mut params: Vec<ParamMut<'_, f64>> = head
            .tensors_mut()
            .into_iter()
            .map(|(_, value, constraint)| ParamMut { value, constraint })
            .collect();
        sgd_step(&mut params, &grad_refs, &mut state).map_err(|e| e.to_string())?;
        let (_, kernel, c) = head.tensors()[0];
        if c != Constraint::NonNegative {
            return Err("first head tensor is not the constrained kernel".into());
        }
        let m = kernel.min_value();
        min_seen = min_seen.min(m);
        if m < 0.0 {
            return Err(format!("step {step}: min kernel weight {m}"));
        }
    }
    check(
        min_seen >= 0.0,
        format!("min kernel weight {min_seen} ≥ 0 after each of 200 steps"),
        "negative weight",
    )
}

fn synthetic_experiment() -> Outcome {
    let start = Instant::now();
    let base = [
        "epochs=30",
        "batch_size=2",
        "data.source=\"synth\"",
        "data.grid=7",
        "data.task=\"quadrant\"",
        "data.train_per_class=50",
        "data.val_per_class=20",
        "data.noise_std=0.0",
        "backbone.stages=[]",
    ];
    let run = |head: &[&str]| -> Result<f64, String> {
        let o: Vec<String> = base.iter().chain(head).map(|s| s.to_string()).collect();
        let cfg = TrainConfig::from_toml_str("", &o).map_err(|e| e.to_string())?;
        let s = train::run(&cfg, |_| {}).map_err(|e| e.to_string())?;
        Ok(s.rows.last().map_or(0.0, |r| r.val_top1))
    };
    let dw = run(&["head.kind=\"avg_dw_nonneg\"", "head.pool_kernel=1"])?;
    let gap = run(&["head.kind=\"gap\""])?;
    within(start.elapsed(), Duration::from_secs(120), "synthetic experiment")?;
    check(
        dw >= 0.95 && gap <= 0.35,
        format!(
            "avg_dw_nonneg val_top1 {dw}, gap val_top1 {gap}, {:.1}s",
            start.elapsed().as_secs_f64()
        ),
        format!("avg_dw_nonneg val_top1 {dw} (need ≥ 0.95), gap {gap} (need ≤ 0.35)"),
    )
}

fn lr_schedule() -> Outcome {
    let s = LrSchedule::default();
    let got = [s.lr_at(0), s.lr_at(2), s.lr_at(4)];
    let want = [0.045, 0.0423, 0.0397620];
    check(
        got.iter().zip(&want).all(|(g, w)| (g - w).abs() <= 1e-12),
        format!("lr_at(0,2,4) = {got:?}"),
        format!("lr_at(0,2,4) = {got:?}, want {want:?}"),
    )
}

fn determinism() -> Outcome {
    let mut notes = Vec::new();
    for precision in ["f32", "f64"] {
        let o: Vec<String> = [
            format!("precision=\"{precision}\""),
            "epochs=4".into(),
            "batch_size=16".into(),
            "head.kind=\"avg_dw_nonneg_dropout\"".into(),
            "head.pool_kernel=2".into(),
            "data.source=\"synth\"".into(),
            "data.grid=6".into(),
            "data.task=\"quadrant\"".into(),
            "data.train_per_class=10".into(),
            "data.val_per_class=5".into(),
            "data.noise_std=0.1".into(),
            "seeds.init=3".into(),
            "seeds.dropout=4".into(),
            "seeds.shuffle=5".into(),
            "augment.preprocess=\"none\"".into(),
            "augment.channel_shift=0.2".into(),
        ]
        .into();
        let cfg = TrainConfig::from_toml_str("", &o).map_err(|e| e.to_string())?;
        let a = train::run(&cfg, |_| {}).map_err(|e| e.to_string())?;
        let b = train::run(&cfg, |_| {}).map_err(|e| e.to_string())?;
        if a.csv.as_bytes() != b.csv.as_bytes() || a.snapshot != b.snapshot {
            return Err(format!("{precision}: runs differ"));
        }
        notes.push(format!("{precision} {} bytes", a.csv.len()));
    }
    Ok(format!(
        "identical CSVs and snapshots across two runs ({})",
        notes.join(", ")
    ))
}

fn gradcam_properties() -> Outcome {
    let spec = HeadSpec::new(HeadKind::AvgDwNonneg, 4).with_pool(2);
    let bb = SmallBackboneSpec::desk_default();
    let mut model = Model::<f64>::build(&bb, &spec, 6).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut images = Vec::new();
    for _ in 0..10 {
        let data = (0..64 * 64 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        images.push(Tensor::new([1, 64, 64, 3], data).unwrap());
    }
    let fm_dims = model.feature_map_spec().map_err(|e| e.to_string())?;
    let mut worst_scale = 0.0f64;
    for (i, x) in images.iter().enumerate() {
        let class = i % 4;
        let (fm, g) = model.feature_map_gradient(x, class).map_err(|e| e.to_string())?;
        let hm = grad_cam(&fm, &g, class, true).map_err(|e| e.to_string())?;
        if hm.dims() != (fm_dims.height, fm_dims.width) {
            return Err(format!("map {:?} vs feature map {fm_dims}", hm.dims()));
        }
        if hm.values.data().iter().any(|&v| v.is_nan() || v < 0.0) || heatmap_pixels(&hm, 16).is_err() {
            return Err("negative heatmap value".into());
        }
        let mut scaled = model.clone();
        scaled.head.fc_weight = scaled.head.fc_weight.scale(3.7).unwrap();
        scaled.head.fc_bias = scaled.head.fc_bias.scale(3.7).unwrap();
        let (fm2, g2) = scaled.feature_map_gradient(x, class).map_err(|e| e.to_string())?;
        let hm2 = grad_cam(&fm2, &g2, class, true).map_err(|e| e.to_string())?;
        for (a, b) in hm.values.data().iter().zip(hm2.values.data()) {
            worst_scale = worst_scale.max((a - b).abs());
        }
    }
    if worst_scale > 1e-6 {
        return Err(format!(
            "normalized map changes by {worst_scale:.2e} under logit scaling"
        ));
    }
    model.head.fc_weight = model.head.fc_weight.zeros_like();
    let (fm, g) = model.feature_map_gradient(&images[0], 0).map_err(|e| e.to_string())?;
    let hm = grad_cam(&fm, &g, 0, true).map_err(|e| e.to_string())?;
    check(
        hm.values.data().iter().all(|&v| v == 0.0),
        format!("zero gradient → zero map; maps nonnegative, {fm_dims} spatial; scaling drift {worst_scale:.1e}"),
        "zero-weight classifier gave a nonzero map",
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("parameter-table reproduction", parameter_table),
        ("head geometry", head_geometry),
        ("gradient suite", gradient_suite),
        ("GAP subsumption", gap_subsumption),
        ("non-negativity", non_negativity),
        ("discriminating synthetic experiment", synthetic_experiment),
        ("learning-rate schedule", lr_schedule),
        ("determinism", determinism),
        ("Grad-CAM properties", gradcam_properties),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS  {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
