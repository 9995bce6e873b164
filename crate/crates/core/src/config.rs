use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamHyper;

/// Channel widths of the five feature-extraction stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mini,
    Tiny,
    Small,
    Base,
}

impl Variant {
    pub fn channels(self) -> [usize; 5] {
        match self {
            Variant::Mini => [8, 16, 32, 32, 32],
            Variant::Tiny => [16, 32, 64, 64, 64],
            Variant::Small => [32, 64, 128, 128, 128],
            Variant::Base => [64, 128, 256, 256, 256],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    L1,
    L2,
}

impl LossTerm {
    pub fn exponent(self) -> u32 {
        match self {
            LossTerm::L1 => 1,
            LossTerm::L2 => 2,
        }
    }
}

/// Learning rate held for `constant_epochs`, then halved every `halve_every`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub constant_epochs: usize,
    pub halve_every: usize,
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize) -> f64 {
        if epoch < self.constant_epochs || self.halve_every == 0 {
            return 1.0;
        }
        0.5f64.powi(((epoch - self.constant_epochs) / self.halve_every + 1) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.beta1, beta2: self.beta2, weight_decay: self.weight_decay, ..AdamHyper::default() }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_schedule.factor(epoch)
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-6,
            batch: 8,
            epochs: 40,
            lr_schedule: LrSchedule { constant_epochs: 15, halve_every: 5 },
        }
    }
}

/// Everything needed to build, train and run a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrruConfig {
    pub channels: [usize; 5],
    pub k: usize,
    pub iterations: usize,
    /// Guidance scale used by each update step, coarse to fine.
    pub scale_schedule: Vec<f64>,
    pub gamma: f64,
    pub loss_terms: Vec<LossTerm>,
    pub max_depth_mm: f64,
    pub optimizer: OptimizerConfig,
    pub depth_only: bool,
    pub seed: u64,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Trailing samples of a dataset directory held out for validation.
    #[serde(default)]
    pub val_count: usize,
}

fn default_slope() -> f64 {
    0.1
}

pub const SCALES: [f64; 4] = [0.125, 0.25, 0.5, 1.0];

impl LrruConfig {
    /// Outdoor-style configuration (100 m depth cap).
    pub fn variant(variant: Variant) -> Self {
        LrruConfig {
            channels: variant.channels(),
            k: 3,
            iterations: 4,
            scale_schedule: SCALES.to_vec(),
            gamma: 0.8,
            loss_terms: vec![LossTerm::L1, LossTerm::L2],
            max_depth_mm: 100_000.0,
            optimizer: OptimizerConfig::default(),
            depth_only: false,
            seed: 0,
            leaky_slope: default_slope(),
            val_count: 0,
        }
    }

    pub fn mini() -> Self {
        LrruConfig::variant(Variant::Mini)
    }

    /// Mini with the 10 m indoor depth cap.
    pub fn mini_indoor() -> Self {
        LrruConfig { max_depth_mm: 10_000.0, ..LrruConfig::mini() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scale_schedule.len() != self.iterations {
            return bad(format!("scale_schedule has {} entries for {} iterations", self.scale_schedule.len(), self.iterations));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.k % 2 == 0 || self.k < 3 {
            return bad(format!("kernel size {} must be odd and at least 3", self.k));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        if let Some(s) = self.scale_schedule.iter().find(|s| !SCALES.contains(s)) {
            return bad(format!("scale {s} is not one of {SCALES:?}"));
        }
        if self.loss_terms.is_empty() {
            return bad("loss_terms must not be empty".into());
        }
        if !(self.max_depth_mm > 0.0 && self.max_depth_mm.is_finite()) {
            return bad("max_depth_mm must be positive".into());
        }
        if self.optimizer.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Index into the four guidance scales for update step `t`.
    pub fn scale_index(&self, t: usize) -> usize {
        SCALES.iter().position(|&s| s == self.scale_schedule[t]).expect("validated schedule")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: LrruConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LrruConfig::from_json(&text)
    }
}

impl Default for LrruConfig {
    fn default() -> Self {
        LrruConfig::mini()
    }
}
