use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use headlab::autodiff::suite::{run_suite, SUITE_STEP, SUITE_TOL};
use headlab::backbone::REGISTRY;
use headlab::config::TrainConfig;
use headlab::data::{self, decode_image, load_dataset, resize_bilinear, Split, SynthTask};
use headlab::gradcam::{export_heatmap, grad_cam, heatmap_file_name, heatmap_pixels, HeatMap};
use headlab::heads::{HeadKind, HeadSpec};
use headlab::model::Model;
use headlab::reference::{model_param_count, PUBLISHED_COUNTS};
use headlab::snapshot::{self, AnyModel, SnapshotMeta};
use headlab::train::{self, evaluate};
use headlab::{seed, Error, Scalar, Tensor};

#[derive(Parser)]
#[command(
    name = "headlab",
    version,
    about = "Compare classification heads on convolutional feature maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter counts for a registered backbone plus a head
    Params(ParamsArgs),
    /// Train a model and write metrics.csv and model.snap
    Train(TrainArgs),
    /// Top-1 / top-5 accuracy of a snapshot on a dataset directory
    Eval(EvalArgs),
    /// Finite-difference check of every adjoint and head
    Gradcheck(GradcheckArgs),
    /// Export Grad-CAM heatmaps as PGM
    Gradcam(GradcamArgs),
    /// Write a synthetic position dataset as train/ and val/ directories
    Synth(SynthArgs),
    /// List the backbone registry
    Registry,
}

#[derive(Args)]
struct ParamsArgs {
    /// Check every published count (`paper`)
    #[arg(long, value_name = "NAME")]
    table: Option<String>,
    #[arg(long, default_value = "resnet50")]
    backbone: String,
    #[arg(long, default_value_t = 224)]
    input_side: usize,
    #[arg(long, default_value_t = 70)]
    classes: usize,
    #[arg(long, default_value = "gap")]
    head: String,
    #[arg(long)]
    pool: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set head.kind=gap`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as `--set output.dir=...`)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Dataset root laid out as `<class>/<image>`
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 70)]
    batch_size: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Corrupt this op's adjoint to confirm the check catches it
    #[arg(long, value_name = "OP")]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    class: usize,
    #[arg(long)]
    out: PathBuf,
    /// Second snapshot (usually a GAP head on the same backbone) rendered alongside
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Nearest-neighbour block size; the backbone stride gives input resolution
    #[arg(long, default_value_t = 1)]
    upscale: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    grid: usize,
    #[arg(long, default_value = "quadrant")]
    task: String,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    val_per_class: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(5, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Params(a) => cmd_params(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Gradcam(a) => cmd_gradcam(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Registry => cmd_registry(),
    }
}

fn group(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cmd_params(a: ParamsArgs) -> anyhow::Result<ExitCode> {
    if let Some(table) = a.table {
        if table != "paper" {
            return Err(Error::Config(format!("unknown table `{table}` (expected `paper`)")).into());
        }
        let mut failures = 0;
        println!(
            "{:<32} {:<12} {:<24} {:>12} {:>12}  status",
            "table", "backbone", "head", "expected", "computed"
        );
        for row in PUBLISHED_COUNTS {
            let (_, _, total) = row.reproduce()?;
            let ok = total == row.expected;
            failures += usize::from(!ok);
            let head = match row.pool_kernel {
                Some(p) => format!("{} (pool {p})", row.head),
                None => row.head.to_string(),
            };
            println!(
                "{:<32} {:<12} {:<24} {:>12} {:>12}  {}",
                row.table,
                row.backbone,
                head,
                group(row.expected),
                group(total),
                if ok { "PASS" } else { "FAIL" }
            );
        }
        println!(
            "{} of {} published counts reproduced",
            PUBLISHED_COUNTS.len() - failures,
            PUBLISHED_COUNTS.len()
        );
        return Ok(if failures == 0 {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(5)
        });
    }
    let kind: HeadKind = a.head.parse()?;
    let mut spec = HeadSpec::new(kind, a.classes);
    spec.pool_kernel = a.pool;
    let (base, head, total) = model_param_count(&a.backbone, a.input_side, &spec)?;
    println!("backbone  {:>14}", group(base));
    println!("head      {:>14}", group(head));
    println!("total     {:>14}", group(total));
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let mut overrides = Vec::new();
    let quoted = |s: &str| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""));
    if let Some(e) = a.epochs {
        overrides.push(format!("epochs={e}"));
    }
    if let Some(b) = a.batch_size {
        overrides.push(format!("batch_size={b}"));
    }
    if let Some(h) = &a.head {
        overrides.push(format!("head.kind={}", quoted(h)));
    }
    if let Some(p) = a.pool {
        overrides.push(format!("head.pool_kernel={p}"));
    }
    if let Some(p) = &a.precision {
        overrides.push(format!("precision={}", quoted(p)));
    }
    if let Some(o) = &a.out {
        overrides.push(format!("output.dir={}", quoted(&o.to_string_lossy())));
    }
    overrides.extend(a.overrides);
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p, &overrides)?,
        None => TrainConfig::from_toml_str("", &overrides)?,
    };
    eprintln!("{}", train::CSV_HEADER);
    let summary = train::run(&cfg, |row| eprintln!("{}", row.csv_line()))?;
    eprintln!("trainable parameters: {}", group(summary.param_count as u64));
    if let Some(name) = &cfg.backbone.accounting_name {
        let spec = cfg.head.spec(summary_classes(&cfg)?);
        let (_, _, total) = model_param_count(name, cfg.image_side, &spec)?;
        eprintln!("{name} at {} with this head: {}", cfg.image_side, group(total));
    }
    match &cfg.output.dir {
        Some(dir) => eprintln!("wrote {}", dir.display()),
        None => print!("{}", summary.csv),
    }
    Ok(ExitCode::SUCCESS)
}

fn summary_classes(cfg: &TrainConfig) -> anyhow::Result<usize> {
    Ok(match &cfg.data {
        headlab::config::DataConfig::Synth { grid, task, .. } => task.classes(*grid),
        headlab::config::DataConfig::Dir { train, .. } => std::fs::read_dir(train)
            .with_context(|| format!("reading {}", train.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .count(),
    })
}

fn eval_typed<T: Scalar>(m: &Model<T>, meta: &SnapshotMeta, a: &EvalArgs) -> anyhow::Result<(f64, f64)> {
    let bb = &meta.backbone;
    let ds = load_dataset(&a.data, bb.input_side, meta.scale, Split::Val)?;
    if ds.image_dims().map(|d| d[2]) != Some(bb.input_channels) {
        return Err(Error::Config(format!("dataset images do not have {} channels", bb.input_channels)).into());
    }
    Ok(evaluate(m, &ds, a.batch_size, meta.preprocess)?)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let (model, meta) = snapshot::load(&a.snapshot)?;
    let (top1, top5) = match &model {
        AnyModel::F32(m) => eval_typed(m, &meta, &a)?,
        AnyModel::F64(m) => eval_typed(m, &meta, &a)?,
    };
    println!("top1 {}", train::format_sig6(top1));
    println!("top5 {}", train::format_sig6(top5));
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let report = run_suite(a.inject_fault.as_deref())?;
    println!("step {SUITE_STEP:e}, tolerance {SUITE_TOL:e}");
    for e in &report.entries {
        println!(
            "{:<32} {:>12.3e}  {}",
            e.name,
            e.report.max_rel_error,
            if e.report.pass { "PASS" } else { "FAIL" }
        );
    }
    println!("elapsed {:.2}s", report.elapsed.as_secs_f64());
    if report.pass() {
        println!("all checks passed");
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(w) = report.worst() {
        let (param, coord) = w.report.worst.unwrap_or((0, 0));
        println!(
            "worst: {} parameter {param} coordinate {coord}, relative error {:.3e}",
            w.name, w.report.max_rel_error
        );
    }
    Ok(ExitCode::from(4))
}

fn load_input(path: &Path, meta: &SnapshotMeta) -> anyhow::Result<Tensor<f32>> {
    let bb = &meta.backbone;
    let raw = decode_image(path)?;
    let img = resize_bilinear(&raw, bb.input_side, bb.input_side)?.scale(meta.scale)?;
    if img.dims()[2] != bb.input_channels {
        return Err(Error::Data(format!(
            "{} has {} channels, the model expects {}",
            path.display(),
            img.dims()[2],
            bb.input_channels
        ))
        .into());
    }
    let img = data::preprocess(&img, meta.preprocess)?;
    let dims = [1, bb.input_side, bb.input_side, bb.input_channels];
    Ok(img.reshape(dims)?)
}

fn heatmap_typed<T: Scalar>(m: &Model<T>, x: &Tensor<f32>, class: usize) -> anyhow::Result<HeatMap> {
    let (fm, grad) = m.feature_map_gradient(&x.cast::<T>(), class)?;
    Ok(grad_cam(&fm, &grad, class, true)?)
}

fn heatmap_for(snapshot_path: &Path, image: &Path, class: usize) -> anyhow::Result<(HeatMap, SnapshotMeta)> {
    let (model, meta) = snapshot::load(snapshot_path)?;
    let x = load_input(image, &meta)?;
    let hm = match &model {
        AnyModel::F32(m) => heatmap_typed(m, &x, class)?,
        AnyModel::F64(m) => heatmap_typed(m, &x, class)?,
    };
    Ok((hm, meta))
}

fn cmd_gradcam(a: GradcamArgs) -> anyhow::Result<ExitCode> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let stem = a
        .image
        .file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    let (hm, meta) = heatmap_for(&a.snapshot, &a.image, a.class)?;
    let path = a.out.join(heatmap_file_name(&stem, meta.head.kind.name(), a.class));
    export_heatmap(&hm, &path, a.upscale)?;
    println!("{}", path.display());

    if let Some(other) = &a.compare {
        let (hm2, meta2) = heatmap_for(other, &a.image, a.class)?;
        if meta2.head.kind == meta.head.kind {
            return Err(Error::Config("both snapshots use the same head kind".into()).into());
        }
        let path2 = a.out.join(heatmap_file_name(&stem, meta2.head.kind.name(), a.class));
        export_heatmap(&hm2, &path2, a.upscale)?;
        println!("{}", path2.display());

        let (h1, w1, p1) = heatmap_pixels(&hm, a.upscale)?;
        let (h2, w2, p2) = heatmap_pixels(&hm2, a.upscale)?;
        if h1 == h2 {
            let mut side = Vec::with_capacity(h1 * (w1 + w2));
            for i in 0..h1 {
                side.extend_from_slice(&p1[i * w1..(i + 1) * w1]);
                side.extend_from_slice(&p2[i * w2..(i + 1) * w2]);
            }
            let name = format!(
                "{stem}_{}_vs_{}_{}.pgm",
                meta.head.kind.name(),
                meta2.head.kind.name(),
                a.class
            );
            let path3 = a.out.join(name);
            data::write_pnm(&path3, w1 + w2, h1, 1, &side)?;
            println!("{}", path3.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let task: SynthTask = match a.task.as_str() {
        "quadrant" => SynthTask::Quadrant,
        "per_cell" | "per-cell" => SynthTask::PerCell,
        other => return Err(Error::Config(format!("unknown synthetic task `{other}`")).into()),
    };
    let mut rt = seed::stream(a.seed, &[seed::PURPOSE_SYNTH_TRAIN]);
    let mut rv = seed::stream(a.seed, &[seed::PURPOSE_SYNTH_VAL]);
    let train = data::synth_position_dataset(a.grid, task, a.train_per_class, a.noise_std, Split::Train, &mut rt)?;
    let val = data::synth_position_dataset(a.grid, task, a.val_per_class, a.noise_std, Split::Val, &mut rv)?;
    train.write_to_dir(&a.out.join("train"), 255.0)?;
    val.write_to_dir(&a.out.join("val"), 255.0)?;
    println!(
        "wrote {} train and {} val images ({} classes) under {}",
        train.len(),
        val.len(),
        train.num_classes(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_registry() -> anyhow::Result<ExitCode> {
    println!("{:<12} {:>12} {:>9} {:>7}", "name", "base", "channels", "stride");
    for e in REGISTRY {
        println!(
            "{:<12} {:>12} {:>9} {:>7}",
            e.name,
            group(e.base_params),
            e.out_channels,
            e.output_stride
        );
    }
    Ok(ExitCode::SUCCESS)
}
