//! Run configuration: a JSON document layered over an embedded preset.
//!
//! ```json
//! { "preset": "toy", "seed": 7, "data": { "root": "data/synth" },
//!   "train": { "total_epochs": 20 }, "model": { "mode": "baseline" } }
//! ```
//!
//! Objects merge key by key into the preset; any other value replaces the
//! preset's. Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{AugmentConfig, PreprocessConfig, QualityConfig, SplitConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "QVITON_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Band read from multi-band rasters.
    pub band: usize,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub min_variance_ratio: f64,
    pub max_mode_fraction: f64,
}

impl DataConfig {
    pub fn quality(&self) -> QualityConfig {
        QualityConfig {
            min_variance_ratio: self.min_variance_ratio,
            max_mode_fraction: self.max_mode_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write `last.ckpt` every this many epochs (and always at the end).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let data = |size| DataConfig {
            root: PathBuf::from("data"),
            band: 0,
            split: SplitConfig::default(),
            preprocess: PreprocessConfig {
                size,
                ..PreprocessConfig::default()
            },
            augment: AugmentConfig::default(),
            min_variance_ratio: QualityConfig::default().min_variance_ratio,
            max_mode_fraction: QualityConfig::default().max_mode_fraction,
        };
        match preset {
            Preset::Paper => Self {
                preset,
                seed: 42,
                model: ModelConfig::paper(),
                train: TrainConfig::default(),
                data: data(224),
                output: OutputConfig {
                    dir: PathBuf::from("runs/paper"),
                    checkpoint_every: 1,
                },
            },
            Preset::Toy => Self {
                preset,
                seed: 42,
                model: ModelConfig::toy(),
                train: TrainConfig {
                    batch_size: 16,
                    total_epochs: 30,
                    eval_batch_size: 64,
                    ..TrainConfig::default()
                },
                data: data(56),
                output: OutputConfig {
                    dir: PathBuf::from("runs/toy"),
                    checkpoint_every: 1,
                },
            },
        }
    }

    /// Merges `overrides` into the preset it names (`"preset"`, default toy).
    pub fn from_value(overrides: Value) -> Result<Self> {
        let preset = match overrides.get("preset") {
            None => Preset::Toy,
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|_| Error::Config(format!("preset: expected \"paper\" or \"toy\", got {v}")))?,
        };
        let mut merged = serde_json::to_value(Self::preset(preset))?;
        merge(&mut merged, overrides);
        let cfg: Self = serde_path_to_error::deserialize(merged)
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        if !value.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        Self::from_value(value)
    }

    /// Reads a config file, resolves relative paths against its directory
    /// and applies the seed environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.root, &mut self.output.dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.split.validate()?;
        self.data.preprocess.validate()?;
        if self.data.preprocess.size != self.model.vit.image_size {
            return Err(Error::Config(format!(
                "data.preprocess.size ({}) must equal model.vit.image_size ({})",
                self.data.preprocess.size, self.model.vit.image_size
            )));
        }
        if self.model.quanv.in_channels != 3 || self.model.vit.in_channels != 3 {
            return Err(Error::Config("model in_channels must be 3 (grey band replicated to RGB)".into()));
        }
        let a = &self.data.augment;
        if !(0.0..=1.0).contains(&a.hflip) || !(0.0..=1.0).contains(&a.vflip) {
            return Err(Error::Config("data.augment flip probabilities must be in [0, 1]".into()));
        }
        if self.output.checkpoint_every == 0 {
            return Err(Error::Config("output.checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Checks that referenced inputs exist.
    pub fn validate_paths(&self) -> Result<()> {
        if !self.data.root.is_dir() {
            return Err(Error::Config(format!("data.root: {} is not a directory", self.data.root.display())));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;
    use crate::model::Mode;

    #[test]
    fn presets_are_complete_and_valid() {
        for p in [Preset::Paper, Preset::Toy] {
            let cfg = RunConfig::preset(p);
            cfg.validate().unwrap();
            let round: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
            assert_eq!(round, cfg);
        }
        assert_eq!(RunConfig::preset(Preset::Paper).model.vit.d_model, 1024);
        assert_eq!(RunConfig::from_value(json!({})).unwrap(), RunConfig::preset(Preset::Toy));
    }

    #[test]
    fn overrides_merge_into_nested_fields() {
        let cfg = RunConfig::from_value(json!({
            "preset": "toy",
            "seed": 9,
            "train": { "total_epochs": 12, "lr_max": 1e-6 },
            "model": { "mode": "baseline" },
            "data": { "split": { "granularity": "tile" } }
        }))
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.total_epochs, 12);
        assert_eq!(cfg.train.lr_max, 1e-6);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.model.mode, Mode::Baseline);
        assert_eq!(cfg.data.split.ratios, [0.7, 0.15, 0.15]);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_value(json!({ "train": { "lr_max": "fast" } })).unwrap_err().to_string();
        assert!(err.contains("train.lr_max"), "{err}");
        let err = RunConfig::from_value(json!({ "train": { "lr_maximum": 1.0 } })).unwrap_err().to_string();
        assert!(err.contains("lr_maximum"), "{err}");
        let err = RunConfig::from_value(json!({ "model": { "vit": { "image_size": 70 } } })).unwrap_err().to_string();
        assert!(err.contains("data.preprocess.size"), "{err}");
        let err = RunConfig::from_value(json!({ "preset": "huge" })).unwrap_err().to_string();
        assert!(err.contains("preset"), "{err}");
        assert!(RunConfig::from_json_str("[1]").is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"data": {"root": "tiles"}, "output": {"dir": "/abs/out"}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.data.root, dir.path().join("tiles"));
        assert_eq!(cfg.output.dir, PathBuf::from("/abs/out"));
        assert!(cfg.validate_paths().is_err());
    }
}
