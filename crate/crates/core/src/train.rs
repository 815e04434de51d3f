//! Client-side optimization regimen: warmup + cosine learning-rate schedule,
//! global-norm gradient clipping and plain SGD.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BASE_LR: f64 = 0.03;
pub const DEFAULT_WARMUP_STEPS: usize = 100;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
}

impl TrainSchedule {
    pub fn new(total_steps: usize) -> Self {
        TrainSchedule {
            base_lr: DEFAULT_BASE_LR,
            warmup_steps: DEFAULT_WARMUP_STEPS.min(total_steps),
            total_steps,
            clip_norm: DEFAULT_CLIP_NORM,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(FedError::Config("schedule.base_lr must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(FedError::Config("schedule.clip_norm must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(FedError::Config("schedule.batch_size must be at least 1".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(FedError::Config(format!(
                "schedule.warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at
/// `total_steps`.
pub fn lr_at_step(schedule: &TrainSchedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(FedError::Runtime(format!(
            "step {step} outside schedule of {} steps",
            schedule.total_steps
        )));
    }
    let base = schedule.base_lr;
    let warm = schedule.warmup_steps;
    if step < warm {
        return Ok(base * step as f64 / warm as f64);
    }
    let span = schedule.total_steps - warm;
    let progress = if span == 0 { 1.0 } else { (step - warm) as f64 / span as f64 };
    if progress >= 1.0 {
        return Ok(0.0);
    }
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `clip_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// `w ← w − lr·g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(FedError::shape("sgd_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        p.same_shape(g, "sgd_step")?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}
