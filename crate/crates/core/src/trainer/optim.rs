//! AdamW with decoupled weight decay and a linear-warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;

pub const REFERENCE_BATCH: usize = 1024;
pub const REFERENCE_LR: f64 = 3e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::for_batch(REFERENCE_BATCH)
    }
}

impl OptimConfig {
    /// Defaults with the peak rate scaled linearly from 3e-4 at batch 1024.
    pub fn for_batch(batch_size: usize) -> Self {
        Self {
            peak_lr: REFERENCE_LR * batch_size as f64 / REFERENCE_BATCH as f64,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            batch_size,
            epochs: 100,
            warmup_epochs: 10,
            steps_per_epoch: 1,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("peak_lr", self.peak_lr),
            ("eps", self.eps),
            ("batch_size", self.batch_size as f64),
            ("epochs", self.epochs as f64),
            ("steps_per_epoch", self.steps_per_epoch as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr` over W steps, then cosine decay to 0 at T.
pub fn lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    let w = cfg.warmup_steps();
    let t = cfg.total_steps();
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    if step >= t {
        return 0.0;
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments, same layout as the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: Parameters + Clone> AdamState<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

/// One AdamW update. Parameters and moments are kept on the f32 grid so a
/// checkpoint round trip is lossless. Nothing is modified when any gradient
/// is non-finite.
pub fn adamw_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    let grads = grads.tensors();
    if let Some(bad) = grads.iter().find(|g| g.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient(bad.name.clone()));
    }
    let mut ps = params.tensors_mut();
    if ps.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors but {} gradients",
            ps.len(),
            grads.len()
        )));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.iter_mut().zip(&grads).zip(ms).zip(vs) {
        if p.data.len() != g.data.len() || p.name != g.name {
            return Err(Error::Shape(format!(
                "gradient `{}` does not match `{}`",
                g.name, p.name
            )));
        }
        let decay = if p.role.decays() { lr * cfg.weight_decay } else { 0.0 };
        for i in 0..p.data.len() {
            let gi = g.data[i];
            let mi = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            let mut w = p.data[i];
            w -= decay * w;
            w -= lr * update;
            p.data[i] = to_f32_grid(w);
            m.data[i] = to_f32_grid(mi);
            v.data[i] = to_f32_grid(vi);
        }
    }
    Ok(())
}
