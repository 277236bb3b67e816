//! One configuration schema shared by every command.

use std::path::Path;

use fovea_core::detector::DetectorConfig;
use fovea_core::inference::InferenceParams;
use fovea_core::loss::LossParams;
use fovea_core::tensor::SgdConfig;
use fovea_core::AssignConfig;
use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, DatasetSpec};
use crate::error::{Error, Result};

/// File name the resolved configuration is written under in every output directory.
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fractions of the total iteration count at which the rate drops by 10x.
    pub lr_drops: Vec<f64>,
    /// Iterations of linear warmup from `warmup_factor * lr`.
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    /// Gradient L2-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub hflip: bool,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (the last epoch is always saved).
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 8,
            lr_drops: vec![2.0 / 3.0, 11.0 / 12.0],
            warmup_iters: 100,
            warmup_factor: 1.0 / 3.0,
            clip_norm: 0.0,
            hflip: true,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size and checkpoint_every must be positive".into(),
            ));
        }
        if self.lr_drops.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("lr_drops {:?} outside [0, 1]", self.lr_drops)));
        }
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return Err(Error::Config(format!("warmup_factor {}", self.warmup_factor)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("clip_norm {}", self.clip_norm)));
        }
        Ok(())
    }

    /// Learning rate at iteration `iter` of `total`.
    pub fn lr_at(&self, base: f64, iter: usize, total: usize) -> f64 {
        let drops = self
            .lr_drops
            .iter()
            .filter(|f| iter >= (**f * total as f64).floor() as usize)
            .count();
        let mut lr = base * 0.1f64.powi(drops as i32);
        if iter < self.warmup_iters {
            let t = iter as f64 / self.warmup_iters as f64;
            lr *= self.warmup_factor + (1.0 - self.warmup_factor) * t;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub assign: AssignConfig,
    pub loss: LossParams,
    pub sgd: SgdConfig,
    pub schedule: Schedule,
    pub inference: InferenceParams,
    pub dataset: DatasetSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.assign.validate()?;
        self.loss.validate()?;
        self.sgd.validate()?;
        self.schedule.validate()?;
        let levels = (self.detector.max_level - self.detector.min_level + 1) as usize;
        self.inference.validate(levels)?;
        self.dataset.validate()
    }
}
