//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::encoders::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update of a flat parameter slice at step `t` (1-based).
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamWConfig) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..param.len() {
        param[i] *= decay;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies one AdamW step to every parameter block.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptState, cfg: &AdamWConfig) -> Result<()> {
    let layout = |p: &ModelParams| p.blocks().into_iter().map(|(n, b)| (n, b.len())).collect::<Vec<_>>();
    let want = layout(params);
    for (what, other) in [("gradient", grads), ("first moment", &state.m), ("second moment", &state.v)] {
        if layout(other) != want {
            return Err(Error::Input(format!("{what} blocks do not match the parameters")));
        }
    }
    state.step += 1;
    let t = state.step;
    let g = grads.blocks();
    let mut m = state.m.blocks_mut();
    let mut v = state.v.blocks_mut();
    for (k, (_, p)) in params.blocks_mut().into_iter().enumerate() {
        adamw_update(p, g[k].1, m[k].1, v[k].1, t, cfg);
    }
    Ok(())
}
