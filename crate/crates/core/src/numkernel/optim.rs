//! AdamW with decoupled weight decay.
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
//! p ← p − lr · (m / (1−β₁ᵗ)) / (sqrt(v / (1−β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::gradcheck::Parameters;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<P> {
    pub config: AdamWConfig,
    first_moment: P,
    second_moment: P,
    step: u64,
}

impl<P: Parameters> OptimizerState<P> {
    pub fn new(params: &P, config: AdamWConfig) -> Self {
        Self {
            config,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub fn adamw_step<P: Parameters>(params: &mut P, grads: &P, state: &mut OptimizerState<P>) -> Result<()> {
    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let grads = grads.tensors();
    let mut first = state.first_moment.tensors_mut();
    let mut second = state.second_moment.tensors_mut();
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() {
        return Err(Error::shape("adamw_step", "parameter/gradient count mismatch"));
    }
    for (i, (name, p)) in tensors.iter_mut().enumerate() {
        let g = grads[i].1;
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw_step", format!("gradient shape for `{name}`")));
        }
        let m = first[i].1.data_mut();
        let v = second[i].1.data_mut();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            let gv = g.data()[j];
            *pv -= cfg.lr * cfg.weight_decay * *pv;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
