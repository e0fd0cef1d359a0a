//! The JSON run config accepted by `aim pretrain`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use aim_core::data::OrderingKind;
use aim_core::model::{HeadKind, ModelConfig};
use aim_core::trainer::{AdamWConfig, DataConfig, ObjectiveConfig, PretrainConfig, ScheduleConfig, TrainingConfig};

use crate::UsageError;

/// Relative paths are resolved against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    #[serde(default = "AdamWConfig::pretrain")]
    pub optimizer: AdamWConfig,
    pub data: DataConfig,
    pub objective: ObjectiveConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    /// Parses and validates; schema errors carry the offending field path.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| UsageError(format!("config field `{}`: {}", e.path(), e.inner())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.pretrain().validate()?;
        Ok(cfg)
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            model: self.model.clone(),
            schedule: self.schedule,
            optimizer: self.optimizer,
            data: self.data.clone(),
            objective: self.objective.clone(),
            training: self.training.clone(),
        }
    }

    /// A small run that finishes in seconds on 32×32 images.
    pub fn example() -> Self {
        let mut model = ModelConfig::new(64, 2, 4, (8, 8));
        model.heads = 4;
        model.head_kind = HeadKind::Mlp;
        model.head_blocks = 2;
        model.head_width = 256;
        Self {
            dataset: "data".into(),
            out_dir: "run".into(),
            model,
            schedule: ScheduleConfig {
                peak_lr: 1e-3,
                min_lr: 1e-5,
                warmup_iters: 20,
                total_iters: 200,
            },
            optimizer: AdamWConfig::pretrain(),
            data: DataConfig {
                ordering: OrderingKind::Raster,
                ordering_seed: None,
                augment: true,
                crop_scale: (0.4, 1.0),
                val_fraction: 0.1,
            },
            objective: ObjectiveConfig::ArPixel,
            training: TrainingConfig {
                batch_size: 16,
                seed: 0,
                clip_norm: 1.0,
                prefix: true,
                eval_every: 20,
                checkpoint_every: 50,
                chunks: 8,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_round_trips() {
        let cfg = RunConfig::example();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        cfg.pretrain().validate().unwrap();
    }

    #[test]
    fn unknown_key_reports_path() {
        let mut v = serde_json::to_value(RunConfig::example()).unwrap();
        v["training"]["bogus"] = 1.into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, v.to_string()).unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("training"), "{err}");
        assert!(err.contains("bogus"), "{err}");
    }
}
