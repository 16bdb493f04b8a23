//! Run configuration, stored as TOML.
//!
//! ```toml
//! precision = "f32"
//! image_side = 7
//! batch_size = 70
//! epochs = 30
//! momentum = 0.9
//!
//! [data]
//! source = "synth"        # or "dir" with `train`, `val`, `scale`
//! grid = 7
//! task = "quadrant"
//! train_per_class = 50
//! val_per_class = 20
//! noise_std = 0.0
//!
//! [backbone]
//! stages = []             # identity; see `SmallBackboneSpec`
//!
//! [head]
//! kind = "avg_dw_nonneg"
//! pool_kernel = 1
//!
//! [schedule]
//! initial = 0.045
//! decay = 0.94
//! period_epochs = 2
//!
//! [seeds]
//! init = 0
//! dropout = 0
//! shuffle = 0
//! ```
//!
//! Every key has a default. Omitting `[augment]` disables augmentation;
//! a present `[augment]` table starts from the full recipe. Any key can be
//! overridden with a dotted `section.key=value` assignment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{SmallBackboneSpec, Stage};
use crate::data::{AugmentConfig, SynthTask};
use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadSpec, DEFAULT_DROPOUT_RATE};
use crate::optim::LrSchedule;
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// `root/<class>/<image>` directories.
    Dir {
        train: PathBuf,
        val: PathBuf,
        /// Pixel values (0–255) are multiplied by this after decoding.
        #[serde(default = "one")]
        scale: f32,
    },
    Synth {
        grid: usize,
        task: SynthTask,
        train_per_class: usize,
        val_per_class: usize,
        #[serde(default)]
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f32 {
    1.0
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth {
            grid: 7,
            task: SynthTask::Quadrant,
            train_per_class: 50,
            val_per_class: 20,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stages: Vec<Stage>,
    /// Registry entry whose published parameter count is reported alongside.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accounting_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_kernel: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT_RATE
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Gap,
            pool_kernel: None,
            dropout_rate: DEFAULT_DROPOUT_RATE,
        }
    }
}

impl HeadConfig {
    pub fn spec(&self, classes: usize) -> HeadSpec {
        HeadSpec {
            kind: self.kind,
            pool_kernel: self.pool_kernel,
            dropout_rate: self.dropout_rate,
            classes,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub dropout: u64,
    pub shuffle: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for `metrics.csv` and `model.snap`; nothing is written if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Record real elapsed seconds in the CSV. Off by default so that
    /// repeated runs produce identical files.
    pub wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub precision: Precision,
    /// Side of the square input images (ignored for synthetic data, which
    /// uses the grid size).
    pub image_side: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub schedule: LrSchedule,
    pub seeds: Seeds,
    #[serde(default = "AugmentConfig::disabled")]
    pub augment: AugmentConfig,
    pub output: OutputConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            precision: Precision::F32,
            image_side: 224,
            batch_size: 70,
            epochs: 30,
            momentum: 0.9,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            schedule: LrSchedule::default(),
            seeds: Seeds::default(),
            augment: AugmentConfig::disabled(),
            output: OutputConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.schedule.validate()?;
        self.augment.validate()?;
        if let DataConfig::Synth { grid, .. } = self.data {
            if grid < 2 {
                return Err(Error::config(format!("synthetic grid {grid} must be ≥ 2")));
            }
        } else if self.image_side == 0 {
            return Err(Error::config("image_side must be ≥ 1"));
        }
        Ok(())
    }

    /// Input side actually fed to the backbone.
    pub fn input_side(&self) -> usize {
        match self.data {
            DataConfig::Synth { grid, .. } => grid,
            DataConfig::Dir { .. } => self.image_side,
        }
    }

    pub fn backbone_spec(&self, input_channels: usize) -> SmallBackboneSpec {
        SmallBackboneSpec {
            stages: self.backbone.stages.clone(),
            input_side: self.input_side(),
            input_channels,
        }
    }
}

/// Apply `a.b.c=value`. The value is parsed as a TOML value, falling back
/// to a bare string; an empty value removes the key.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override key `{path}` is malformed")));
    }
    let raw = raw.trim();
    let (last, parents) = keys.split_last().unwrap();
    if raw.is_empty() {
        let mut cursor = Some(&mut *table);
        for k in parents {
            cursor = cursor.and_then(|t| t.get_mut(*k)).and_then(toml::Value::as_table_mut);
        }
        if let Some(t) = cursor {
            t.remove(*last);
        }
        return Ok(());
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cursor = table;
    for k in parents {
        let entry = cursor
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = TrainConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.batch_size, 70);
        assert_eq!(cfg.augment, AugmentConfig::disabled());
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn augment_table_starts_from_recipe() {
        let cfg = TrainConfig::from_toml_str("[augment]\nvflip = false\n", &[]).unwrap();
        assert!(!cfg.augment.vflip);
        assert!(cfg.augment.hflip);
        assert_eq!(cfg.augment.rotation_deg, 360.0);
    }

    #[test]
    fn overrides_win() {
        let text = "epochs = 3\n[head]\nkind = \"gap\"\n";
        let cfg = TrainConfig::from_toml_str(
            text,
            &[
                "epochs=5".into(),
                "head.kind=avg_dw_nonneg".into(),
                "head.pool_kernel=2".into(),
                "seeds.shuffle=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.head.kind, HeadKind::AvgDwNonneg);
        assert_eq!(cfg.head.pool_kernel, Some(2));
        assert_eq!(cfg.seeds.shuffle, 9);

        let text = "[head]\nkind = \"avg_dw_nonneg\"\npool_kernel = 2\n";
        let cfg = TrainConfig::from_toml_str(text, &["head.kind=gap".into(), "head.pool_kernel=".into()]).unwrap();
        assert_eq!(cfg.head.pool_kernel, None);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "batch_size = 0",
            "unknown = 1",
            "[head]\nkind = \"nope\"",
            "momentum = 1.5",
        ] {
            assert!(
                matches!(TrainConfig::from_toml_str(text, &[]), Err(Error::Config(_))),
                "{text}"
            );
        }
        assert!(TrainConfig::from_toml_str("", &["noequals".into()]).is_err());
    }

    #[test]
    fn dir_source() {
        let text = "[data]\nsource = \"dir\"\ntrain = \"a\"\nval = \"b\"\n";
        let cfg = TrainConfig::from_toml_str(text, &[]).unwrap();
        assert!(matches!(cfg.data, DataConfig::Dir { scale, .. } if scale == 1.0));
        assert_eq!(cfg.input_side(), 224);
    }
}
