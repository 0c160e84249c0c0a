use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn new(param: &Tensor) -> Self {
        Self {
            step: 0,
            m: param.zeros_like(),
            v: param.zeros_like(),
        }
    }
}

/// Bias-corrected Adam update of `param` in place.
pub fn adam_step(cfg: &AdamConfig, state: &mut AdamState, param: &mut Tensor, grad: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::Contract(format!(
            "adam: parameter {:?}, gradient {:?}, moments {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    param.ensure_finite("adam update")
}
