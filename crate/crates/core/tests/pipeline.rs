use std::fs;
use std::path::Path;

use headlab::config::TrainConfig;
use headlab::data::{decode_image, load_dataset, write_pnm, Preprocess, Split};
use headlab::model::Model;
use headlab::snapshot::{self, AnyModel};
use headlab::train::{self, evaluate, CSV_HEADER};
use headlab::Error;

fn gradient_image(w: usize, h: usize, shade: u8) -> Vec<u8> {
    (0..w * h * 3).map(|i| ((i % 251) as u8).wrapping_add(shade)).collect()
}

fn two_class_tree(root: &Path) {
    for (class, shade) in [("cats", 0u8), ("dogs", 90)] {
        let dir = root.join(class);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..3 {
            write_pnm(
                &dir.join(format!("{i}.ppm")),
                12,
                10,
                3,
                &gradient_image(12, 10, shade + i),
            )
            .unwrap();
        }
    }
}

fn dir_config(train: &Path, val: &Path, extra: &[&str]) -> TrainConfig {
    let mut o = vec![
        "data.source=\"dir\"".to_string(),
        format!("data.train={:?}", train.to_str().unwrap()),
        format!("data.val={:?}", val.to_str().unwrap()),
        "data.scale=0.00392156862745098".into(),
        "image_side=8".into(),
        "batch_size=3".into(),
        "epochs=2".into(),
        "augment.preprocess=\"none\"".into(),
    ];
    o.extend(extra.iter().map(|s| s.to_string()));
    TrainConfig::from_toml_str("", &o).unwrap()
}

#[test]
fn directory_tree_loads_sorted_classes() {
    let tmp = tempfile::tempdir().unwrap();
    two_class_tree(tmp.path());
    fs::write(tmp.path().join(".DS_Store"), b"junk").unwrap();
    let ds = load_dataset(tmp.path(), 8, 1.0, Split::Train).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.num_classes(), 2);
    assert_eq!(ds.class_names, ["cats", "dogs"]);
    assert_eq!(ds.image_dims().unwrap(), &[8, 8, 3]);
    assert_eq!(ds.samples.iter().filter(|s| s.label == 1).count(), 3);
}

#[test]
fn undecodable_file_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    two_class_tree(tmp.path());
    let bad = tmp.path().join("dogs").join("broken.ppm");
    fs::write(&bad, b"P6 not really").unwrap();
    let err = load_dataset(tmp.path(), 8, 1.0, Split::Train).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("broken.ppm"), "{err}");
}

#[test]
fn empty_class_and_missing_root_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    two_class_tree(tmp.path());
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let err = load_dataset(tmp.path(), 8, 1.0, Split::Train).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("empty"), "{err}");

    let err = load_dataset(&tmp.path().join("nope"), 8, 1.0, Split::Val).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn ppm_is_resized_to_the_input_side() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("only");
    fs::create_dir_all(&dir).unwrap();
    let pixels = vec![77u8; 150 * 150 * 3];
    write_pnm(&dir.join("a.ppm"), 150, 150, 3, &pixels).unwrap();
    let raw = decode_image(&dir.join("a.ppm")).unwrap();
    assert_eq!(raw.dims(), &[150, 150, 3]);
    let ds = load_dataset(tmp.path(), 224, 1.0, Split::Train).unwrap();
    let img = &ds.samples[0].image;
    assert_eq!(img.dims(), &[224, 224, 3]);
    assert!(img.data().iter().all(|&v| (v - 77.0).abs() < 1e-3));
}

#[test]
fn train_snapshot_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (tr, va) = (tmp.path().join("train"), tmp.path().join("val"));
    two_class_tree(&tr);
    two_class_tree(&va);
    let out = tmp.path().join("out");
    let mut cfg = dir_config(&tr, &va, &["head.kind=\"avg_dw_nonneg\"", "head.pool_kernel=2"]);
    cfg.output.dir = Some(out.clone());
    let summary = train::run(&cfg, |_| {}).unwrap();
    assert_eq!(summary.rows.len(), 2);

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv, summary.csv);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);

    let (model, meta) = snapshot::load(&out.join("model.snap")).unwrap();
    assert_eq!(meta.class_names, ["cats", "dogs"]);
    let AnyModel::F32(model) = model else {
        panic!("expected f32 snapshot");
    };
    assert_eq!(model.param_count(), summary.param_count);

    let (_, va_ds) = train::load_datasets(&cfg).unwrap();
    let (top1, top5) = evaluate(&model, &va_ds, 4, Preprocess::None).unwrap();
    let last = summary.rows.last().unwrap();
    assert_eq!(top1, last.val_top1);
    assert_eq!(top5, last.val_top5);
    assert_eq!(top5, 1.0);

    let bytes = fs::read(out.join("model.snap")).unwrap();
    let (again, _) = snapshot::decode(&bytes).unwrap();
    assert_eq!(again, AnyModel::F32(model));
}

#[test]
fn eval_rejects_class_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    two_class_tree(tmp.path());
    let ds = load_dataset(tmp.path(), 8, 1.0 / 255.0, Split::Val).unwrap();
    let cfg = dir_config(tmp.path(), tmp.path(), &[]);
    let model = Model::<f32>::build(&cfg.backbone_spec(3), &cfg.head.spec(5), 0).unwrap();
    let err = evaluate(&model, &ds, 4, Preprocess::None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn zero_epochs_gives_header_only_csv() {
    let tmp = tempfile::tempdir().unwrap();
    two_class_tree(tmp.path());
    let cfg = dir_config(tmp.path(), tmp.path(), &["epochs=0"]);
    let summary = train::run(&cfg, |_| {}).unwrap();
    assert!(summary.rows.is_empty());
    assert_eq!(summary.csv.trim_end(), CSV_HEADER);
}

#[test]
fn divergence_names_epoch_and_batch() {
    let tmp = tempfile::tempdir().unwrap();
    two_class_tree(tmp.path());
    let cfg = dir_config(
        tmp.path(),
        tmp.path(),
        &["schedule.initial=1e30", "data.scale=255.0", "epochs=3"],
    );
    let err = train::run(&cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("epoch ") && msg.contains(" batch "), "{msg}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn epoch_callback_sees_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    two_class_tree(tmp.path());
    let cfg = dir_config(tmp.path(), tmp.path(), &["epochs=3"]);
    let mut seen = Vec::new();
    let summary = train::run(&cfg, |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, summary.rows);
    assert_eq!(seen.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(seen.iter().all(|r| r.wall_seconds == 0.0));
}
