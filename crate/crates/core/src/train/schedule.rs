use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::TrainConfig;

/// Cosine decay from `base` at step 0 to 0 at `total_steps`.
pub fn lr_stage1(step: usize, total_steps: usize, base: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} > total_steps {total_steps}")));
    }
    Ok(base * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Warmup-then-step schedule for Stage Two.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Schedule {
    pub start: f64,
    pub peak: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
}

impl Default for Stage2Schedule {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

impl Stage2Schedule {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            start: c.stage2_lr_start,
            peak: c.stage2_lr_peak,
            warmup_epochs: c.warmup_epochs,
            decay_factor: c.decay_factor,
            decay_epochs: c.decay_epochs.clone(),
        }
    }

    /// Linear from `start` to `peak` over epochs `0..=warmup_epochs`, then
    /// multiplied by `decay_factor` once for every decay epoch reached.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let t = epoch as f64 / self.warmup_epochs as f64;
            return self.start + (self.peak - self.start) * t;
        }
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.peak * self.decay_factor.powi(decays as i32)
    }
}

/// Stage-Two rate with the full-scale defaults.
pub fn lr_stage2(epoch: usize) -> f64 {
    Stage2Schedule::default().lr(epoch)
}
