//! Cosine learning-rate schedule with linear warm-up from zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedule hyper-parameters. Warm-up and total lengths are given in epochs
/// and resolved to steps through `steps_per_epoch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub steps_per_epoch: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.warmup_epochs > 0.0 && self.warmup_epochs < self.total_epochs) {
            return Err(Error::Config(
                "need 0 < warmup_epochs < total_epochs".into(),
            ));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_epochs * self.steps_per_epoch as f64).round() as usize).max(1)
    }

    pub fn total_steps(&self) -> usize {
        let total = (self.total_epochs * self.steps_per_epoch as f64).round() as usize;
        total.max(self.warmup_steps() + 1)
    }
}

/// Learning rate at `step`: linear ramp from 0 to `base_lr` over the warm-up,
/// then cosine decay to 0 at `total_steps`.
pub fn learning_rate(step: usize, config: &ScheduleConfig) -> f64 {
    let warmup = config.warmup_steps();
    let total = config.total_steps();
    if step < warmup {
        return config.base_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
