use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use super::Precision;
use crate::error::{Error, Result};

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64;
    base_lr * 0.5 * (1.0 + (PI * s / total_steps as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Updates applied to this parameter, for bias correction.
    t: u64,
}

/// Adam with bias correction under a cosine learning-rate schedule.
///
/// Parameters without a gradient in a step (off the sampled path) are left
/// alone entirely: neither their weights nor their moments move.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub base_lr: f64,
    pub total_steps: usize,
    step: usize,
    moments: BTreeMap<ParamId, Moments>,
    /// Per-parameter learning-rate multipliers (e.g. a faster task token).
    lr_scale: BTreeMap<ParamId, f64>,
}

impl OptimizerState {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            config: AdamConfig::default(),
            base_lr,
            total_steps,
            step: 0,
            moments: BTreeMap::new(),
            lr_scale: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.base_lr)
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale.insert(id, scale);
    }
}

/// One Adam update over every trainable parameter that received a gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    precision: Precision,
) -> Result<()> {
    for (id, g) in grads.params() {
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at index {bad} of `{}`",
                store.get(id).name
            )));
        }
    }
    let lr = state.current_lr();
    let AdamConfig { beta1, beta2, eps } = state.config;
    for (id, g) in grads.params() {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let n = p.tensor.len();
        let mom = state
            .moments
            .entry(id)
            .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
        if mom.m.len() != n || g.len() != n {
            return Err(Error::Dimension(format!("optimizer state for `{}` does not match", p.name)));
        }
        mom.t += 1;
        let bc1 = 1.0 - beta1.powi(mom.t as i32);
        let bc2 = 1.0 - beta2.powi(mom.t as i32);
        let step_lr = lr * state.lr_scale.get(&id).copied().unwrap_or(1.0);
        let data = p.tensor.data_mut();
        for i in 0..n {
            mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g[i];
            mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = mom.m[i] / bc1;
            let vhat = mom.v[i] / bc2;
            data[i] -= step_lr * mhat / (vhat.sqrt() + eps);
            if precision == Precision::F32 {
                data[i] = data[i] as f32 as f64;
            }
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("`{}` became non-finite at index {bad}", p.name)));
        }
    }
    state.step += 1;
    Ok(())
}
