//! Training loop, evaluation and the per-epoch metrics CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::Graph;
use crate::config::{DataConfig, TrainConfig};
use crate::data::{self, augment, batches, load_dataset, preprocess, sequential_batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;
use crate::optim::{sgd_step, SgdState};
use crate::seed;
use crate::snapshot::{self, SnapshotMeta};
use crate::tensor::{Precision, Scalar, Tensor};

pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_top1,val_top1,val_top5,wall_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        [
            self.epoch.to_string(),
            format_sig6(self.lr),
            format_sig6(self.train_loss),
            format_sig6(self.train_top1),
            format_sig6(self.val_top1),
            format_sig6(self.val_top5),
            format_sig6(self.wall_seconds),
        ]
        .join(",")
    }
}

/// Decimal with 6 significant digits, trailing zeros removed, switching to
/// exponent notation outside `[1e-5, 1e6)` (like C's `%g`).
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-5..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{x:.*}", (5 - exp) as usize))
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Rank of the true class: logits strictly greater, plus equal logits at a
/// smaller index. A hit at `k` means rank < k.
pub fn true_class_rank<T: Scalar>(row: &[T], label: usize) -> usize {
    let y = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > y || (v == y && j < label))
        .count()
}

/// Predicted class with ties going to the smaller index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `(top-1 hits, top-k hits)` for an `[n, classes]` logit matrix.
pub fn topk_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<(usize, usize)> {
    let &[n, classes] = logits.dims() else {
        return Err(Error::shape(format!(
            "logits must be [n, classes], got {}",
            logits.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut top1 = 0;
    let mut topk = 0;
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::data(format!("label {y} out of range for {classes} classes")));
        }
        let rank = true_class_rank(row, y);
        top1 += usize::from(rank < 1);
        topk += usize::from(rank < k);
    }
    Ok((top1, topk))
}

/// Top-1 and top-5 accuracy (top-min(5, K) for fewer classes).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    batch_size: usize,
    prep: data::Preprocess,
) -> Result<(f64, f64)> {
    if ds.num_classes() != model.classes() {
        return Err(Error::config(format!(
            "model has {} classes but the dataset has {}",
            model.classes(),
            ds.num_classes()
        )));
    }
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let k = 5.min(model.classes());
    let (mut h1, mut hk) = (0, 0);
    for idx in sequential_batches(ds.len(), batch_size)? {
        let (x, labels) = ds.stack::<T>(&idx, |_, img| preprocess(img, prep))?;
        let logits = model.logits(&x)?;
        let (a, b) = topk_hits(&logits, &labels, k)?;
        h1 += a;
        hk += b;
    }
    let n = ds.len() as f64;
    Ok((h1 as f64 / n, hk as f64 / n))
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub rows: Vec<MetricsRow>,
}

fn at_batch(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch} batch {batch}: {msg}")),
        other => other,
    }
}

/// Train from scratch on `train`, evaluating on `val` after every epoch.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    train.validate()?;
    val.validate()?;
    if train.num_classes() != val.num_classes() {
        return Err(Error::data(format!(
            "train has {} classes, val has {}",
            train.num_classes(),
            val.num_classes()
        )));
    }
    let dims = train
        .image_dims()
        .ok_or_else(|| Error::data("training set is empty"))?
        .to_vec();
    let head_spec = cfg.head.spec(train.num_classes());
    let mut model = Model::<T>::build(&cfg.backbone_spec(dims[2]), &head_spec, cfg.seeds.init)?;
    let mut state = SgdState::new(
        model.named_tensors().into_iter().map(|(_, t)| t),
        cfg.momentum,
        cfg.schedule.lr_at(0),
    );

    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        state.current_lr = cfg.schedule.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for (b, idx) in batches(train.len(), cfg.batch_size, cfg.seeds.shuffle, epoch)?
            .into_iter()
            .enumerate()
        {
            let mut step = || -> Result<(f64, usize)> {
                let (x, labels) = train.stack::<T>(&idx, |i, img| {
                    let mut rng = seed::stream(cfg.seeds.shuffle, &[seed::PURPOSE_AUGMENT, epoch as u64, i as u64]);
                    augment(img, &cfg.augment, &mut rng)
                })?;
                let mut g = Graph::new();
                let xi = g.constant(x)?;
                let mut rng = seed::stream(cfg.seeds.dropout, &[seed::PURPOSE_DROPOUT, epoch as u64, b as u64]);
                let nodes = model.forward_graph(&mut g, xi, Mode::Train, &mut rng)?;
                let loss = g.softmax_cross_entropy(nodes.logits, &labels)?;
                let loss_value = g.value(loss).item()?.to_f64_lossless();
                if !loss_value.is_finite() {
                    return Err(Error::Numeric(format!("loss is {loss_value}")));
                }
                let (h, _) = topk_hits(g.value(nodes.logits), &labels, 1)?;
                let grads = g.backward(loss)?;
                let grad_refs = nodes
                    .params
                    .iter()
                    .map(|&id| grads.expect(id))
                    .collect::<Result<Vec<_>>>()?;
                sgd_step(&mut model.params_mut(), &grad_refs, &mut state)?;
                Ok((loss_value * idx.len() as f64, h))
            };
            let (l, h) = step().map_err(|e| at_batch(epoch, b, e))?;
            loss_sum += l;
            hits += h;
        }
        let (val_top1, val_top5) = evaluate(&model, val, cfg.batch_size, cfg.augment.preprocess)?;
        let row = MetricsRow {
            epoch,
            lr: state.current_lr,
            train_loss: loss_sum / train.len() as f64,
            train_top1: hits as f64 / train.len() as f64,
            val_top1,
            val_top5,
            wall_seconds: if cfg.output.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&row);
        rows.push(row);
    }
    Ok(TrainOutcome { model, rows })
}

/// Train and validation sets described by the config.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Dir { train, val, scale } => Ok((
            load_dataset(train, cfg.image_side, *scale, Split::Train)?,
            load_dataset(val, cfg.image_side, *scale, Split::Val)?,
        )),
        &DataConfig::Synth {
            grid,
            task,
            train_per_class,
            val_per_class,
            noise_std,
            seed: s,
        } => {
            let mut rt = seed::stream(s, &[seed::PURPOSE_SYNTH_TRAIN]);
            let mut rv = seed::stream(s, &[seed::PURPOSE_SYNTH_VAL]);
            Ok((
                data::synth_position_dataset(grid, task, train_per_class, noise_std, Split::Train, &mut rt)?,
                data::synth_position_dataset(grid, task, val_per_class, noise_std, Split::Val, &mut rv)?,
            ))
        }
    }
}

/// Outcome of [`run`], independent of precision.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub csv: String,
    pub snapshot: Vec<u8>,
    pub param_count: usize,
}

fn snapshot_meta(cfg: &TrainConfig, train: &Dataset, channels: usize) -> SnapshotMeta {
    SnapshotMeta {
        head: cfg.head.spec(train.num_classes()),
        backbone: cfg.backbone_spec(channels),
        class_names: train.class_names.clone(),
        preprocess: cfg.augment.preprocess,
        scale: match cfg.data {
            DataConfig::Dir { scale, .. } => scale,
            DataConfig::Synth { .. } => 1.0 / 255.0,
        },
    }
}

fn run_typed<T: Scalar>(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    on_epoch: impl FnMut(&MetricsRow),
) -> Result<RunSummary> {
    let out = train::<T>(cfg, train_ds, val_ds, on_epoch)?;
    let channels = train_ds.image_dims().map_or(1, |d| d[2]);
    let snapshot = snapshot::encode(&out.model, &snapshot_meta(cfg, train_ds, channels))?;
    Ok(RunSummary {
        csv: metrics_csv(&out.rows),
        rows: out.rows,
        snapshot,
        param_count: out.model.param_count(),
    })
}

/// Load data, train at the configured precision, and write `metrics.csv`
/// and `model.snap` into the output directory if one is set.
pub fn run(cfg: &TrainConfig, on_epoch: impl FnMut(&MetricsRow)) -> Result<RunSummary> {
    cfg.validate()?;
    let (train_ds, val_ds) = load_datasets(cfg)?;
    let summary = match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, &train_ds, &val_ds, on_epoch)?,
        Precision::F64 => run_typed::<f64>(cfg, &train_ds, &val_ds, on_epoch)?,
    };
    if let Some(dir) = &cfg.output.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("metrics.csv"), summary.csv.as_bytes())?;
        write_file(&dir.join("model.snap"), &summary.snapshot)?;
    }
    Ok(summary)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.045), "0.045");
        assert_eq!(format_sig6(0.039762), "0.039762");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.3862943611198906), "1.38629");
        assert_eq!(format_sig6(123456789.0), "1.23457e+08");
        assert_eq!(format_sig6(0.0000012345678), "1.23457e-06");
        assert_eq!(format_sig6(0.25), "0.25");
        assert_eq!(format_sig6(999999.7), "1e+06");
    }

    #[test]
    fn topk_and_ties() {
        let onehot = Tensor::<f64>::from_f64([2, 3], &[1., 0., 0., 0., 0., 1.]).unwrap();
        assert_eq!(topk_hits(&onehot, &[0, 2], 3).unwrap(), (2, 2));
        let uniform = Tensor::<f64>::from_f64([1, 3], &[0.5; 3]).unwrap();
        assert_eq!(argmax(uniform.data()), 0);
        assert_eq!(topk_hits(&uniform, &[0], 1).unwrap(), (1, 1));
        assert_eq!(topk_hits(&uniform, &[2], 1).unwrap(), (0, 0));
        let row: Vec<f64> = (0..70).map(f64::from).collect();
        assert!(true_class_rank(&row, 65) < 5);
        assert!(true_class_rank(&row, 64) >= 5);
    }

    #[test]
    fn zero_epochs_gives_header_only() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let s = run(&cfg, |_| {}).unwrap();
        assert_eq!(s.csv, format!("{CSV_HEADER}\n"));
    }
}
