//! Adam with bias correction and a warmup / inverse-square-root schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// `peak · min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: u64, peak_lr: f64, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("lr_schedule", "steps are counted from 1"));
    }
    if warmup_steps == 0 {
        return Err(Error::invalid("lr_schedule", "warmup_steps must be at least 1"));
    }
    let (s, w) = (step as f64, warmup_steps as f64);
    Ok(peak_lr * (s / w).min((w / s).sqrt()))
}

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, p) in params.iter() {
                s.insert(name, Tensor::zeros(p.shape()));
            }
            s
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &Gradients<f32>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero gradient. Any non-finite gradient aborts the
/// step before anything is modified.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &Gradients<f32>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", &[p.shape(), g.shape()]));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    let scale = match cfg.clip_norm {
        Some(c) => {
            let n = grad_norm(grads);
            if n > c { c / n } else { 1.0 }
        }
        None => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        let g = grads.get(name).map(|g| g.data());
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g[i] as f64 * scale);
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            let pi = &mut p.data_mut()[i];
            *pi = (*pi as f64 - update) as f32;
        }
    }
    Ok(())
}
