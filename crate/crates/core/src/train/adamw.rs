//! AdamW: Adam moments with decoupled weight decay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ParamSet;

#[derive(Debug, Error)]
pub enum AdamWStepError {
    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: String },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers parallel to a parameter set, plus the step
/// counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimizerState { m, v, t: 0 }
    }
}

/// One update:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, bias-corrected `m̂, v̂`,
/// `θ ← θ − lr·m̂/(√v̂+ε) − lr·wd·θ`. The step counter increments before
/// use. `exclude[i]` turns off weight decay for parameter `i`.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
    exclude: &[bool],
) -> Result<(), AdamWStepError> {
    debug_assert_eq!(grads.len(), state.m.len());
    for ((name, _), grad) in params.iter().zip(grads) {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(AdamWStepError::NonFiniteGradient { param: name.to_string() });
        }
    }

    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (_, tensor)) in params.iter_mut().enumerate() {
        let wd = if exclude.get(i).copied().unwrap_or(false) {
            0.0
        } else {
            cfg.weight_decay
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = &grads[i];
        for (j, theta) in tensor.values_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * wd * *theta;
        }
    }
    Ok(())
}
