//! AdamW with global-norm clipping, and the warmup-cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: each step subtracts `lr · weight_decay · p`.
    pub weight_decay: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-5,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// First and second moments, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by, 1 when unclipped.
    pub clip_scale: f64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Multiplier that brings `norm` down to `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// One AdamW update of `params` in place. Gradients are checked for
/// non-finite values before anything is touched.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<StepInfo> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient for {name} has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} in {name} at flat index {i}",
                g.data()[i]
            )));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    let grad_norm = global_norm(grads);
    let scale = clip_scale(grad_norm, cfg.grad_clip);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj * scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            *w -= lr * (update + cfg.weight_decay * *w);
        }
    }
    Ok(StepInfo {
        grad_norm,
        clip_scale: scale,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    /// Defaults to 1% of `total_steps`.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    #[serde(default = "default_final_fraction")]
    pub final_fraction: f64,
}

fn default_peak_lr() -> f64 {
    3e-3
}

fn default_final_fraction() -> f64 {
    0.1
}

impl Schedule {
    pub fn new(peak_lr: f64, total_steps: usize) -> Self {
        Self {
            peak_lr,
            warmup_steps: None,
            total_steps,
            final_fraction: default_final_fraction(),
        }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 100)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup() >= self.total_steps {
            return Err(Error::Config(format!(
                "need 0 <= warmup_steps < total_steps, got {} and {}",
                self.warmup(),
                self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) || !(0.0..=1.0).contains(&self.final_fraction) {
            return Err(Error::Config(format!(
                "peak_lr must be positive and final_fraction in [0, 1], got {} and {}",
                self.peak_lr, self.final_fraction
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0, then cosine decay to `final_fraction · peak` at
/// `total_steps`; flat after that.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    let warmup = s.warmup();
    if step < warmup {
        return s.peak_lr * step as f64 / warmup as f64;
    }
    let span = (s.total_steps - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    let cosine = 0.5 * (1.0 + (PI * progress).cos());
    s.peak_lr * (s.final_fraction + (1.0 - s.final_fraction) * cosine)
}
