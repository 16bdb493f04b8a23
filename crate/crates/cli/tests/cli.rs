use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn headlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn paper_table_reproduces() {
    let o = headlab(&["params", "--table", "paper"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for n in ["23,731,142", "21,052,011", "21,538,051"] {
        assert!(text.contains(n), "{n} missing");
    }
    assert!(!text.contains("FAIL"));
    assert!(text.contains("60 of 60"));
}

#[test]
fn single_param_count() {
    let o = headlab(&[
        "params",
        "--backbone",
        "xception",
        "--input-side",
        "512",
        "--classes",
        "67",
        "--head",
        "avg_dw_nonneg",
        "--pool",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("21,052,011"), "{text}");
}

#[test]
fn unknown_backbone_is_a_config_error() {
    let o = headlab(&["params", "--backbone", "vgg16"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("vgg16"));
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let ok = headlab(&["gradcheck"]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("head:avg_dw_nonneg"));

    let bad = headlab(&["gradcheck", "--inject-fault", "depthwise_conv2d"]);
    assert_eq!(code(&bad), 4);
    assert!(stdout(&bad).contains("FAIL"));

    let unknown = headlab(&["gradcheck", "--inject-fault", "nope"]);
    assert_eq!(code(&unknown), 2);
}

#[test]
fn registry_lists_backbones() {
    let o = headlab(&["registry"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for name in [
        "resnet50",
        "xception",
        "densenet121",
        "densenet169",
        "densenet201",
        "resnet50v2",
    ] {
        assert!(text.contains(name), "{name}");
    }
}

fn write_config(path: &Path, data: &Path, head: &str, out: &Path) {
    let text = format!(
        r#"epochs = 30
batch_size = 2
image_side = 7

[data]
source = "dir"
train = "{train}"
val = "{val}"
scale = 0.00392156862745098

[backbone]
stages = []

[head]
{head}

[output]
dir = "{out}"
"#,
        train = p(&data.join("train")),
        val = p(&data.join("val")),
        out = p(out),
    );
    fs::write(path, text).unwrap();
}

#[test]
fn synth_train_eval_gradcam() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = headlab(&["synth", "--grid", "7", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(data.join("train")).unwrap().count(), 4);

    let runs = [
        ("dw", "kind = \"avg_dw_nonneg\"\npool_kernel = 1"),
        ("gap", "kind = \"gap\""),
    ];
    for (name, head) in runs {
        let cfg = tmp.path().join(format!("{name}.toml"));
        write_config(&cfg, &data, head, &tmp.path().join(name));
        let o = headlab(&["train", "--config", p(&cfg)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(tmp.path().join(name).join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 31);
    }

    let eval = |name: &str| {
        let snap = tmp.path().join(name).join("model.snap");
        let o = headlab(&["eval", "--snapshot", p(&snap), "--data", p(&data.join("val"))]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    assert!(eval("dw").contains("top1 1\n"));
    assert!(eval("gap").contains("top1 0.25\n"));

    let image = fs::read_dir(data.join("val").join("quadrant_3"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let maps = tmp.path().join("maps");
    let o = headlab(&[
        "gradcam",
        "--snapshot",
        p(&tmp.path().join("dw").join("model.snap")),
        "--compare",
        p(&tmp.path().join("gap").join("model.snap")),
        "--image",
        p(&image),
        "--class",
        "3",
        "--upscale",
        "4",
        "--out",
        p(&maps),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stem = image.file_stem().unwrap().to_str().unwrap();
    for name in [
        format!("{stem}_avg_dw_nonneg_3.pgm"),
        format!("{stem}_gap_3.pgm"),
        format!("{stem}_avg_dw_nonneg_vs_gap_3.pgm"),
    ] {
        let bytes = fs::read(maps.join(&name)).unwrap_or_else(|_| panic!("{name} missing"));
        assert!(bytes.starts_with(b"P5\n"), "{name}");
    }
    let side = fs::read(maps.join(format!("{stem}_avg_dw_nonneg_vs_gap_3.pgm"))).unwrap();
    assert!(side.starts_with(b"P5\n56 28\n255\n"));
}

#[test]
fn bad_config_and_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "epochs = \"many\"\n").unwrap();
    assert_eq!(code(&headlab(&["train", "--config", p(&cfg)])), 2);

    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&headlab(&["train", "--config", p(&cfg)])), 2);

    let data = tmp.path().join("missing");
    write_config(&cfg, &data, "kind = \"gap\"", &tmp.path().join("out"));
    let o = headlab(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let o = headlab(&[
        "train",
        "--set",
        "schedule.initial=1e30",
        "--set",
        "data.noise_std=0.5",
        "--set",
        "backbone.stages=[{filters = 4, kernel = 3, stride = 1}]",
        "--set",
        "data.source=\"synth\"",
        "--set",
        "data.grid=7",
        "--set",
        "data.task=\"quadrant\"",
        "--set",
        "data.train_per_class=20",
        "--set",
        "data.val_per_class=5",
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch"));
}
