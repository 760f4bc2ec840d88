use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpGrads};
use crate::error::{CirrlError, Result};

/// Adam hyperparameters. No weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = net.parameters().iter().map(|p| p.len()).collect();
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of `net` in place.
pub fn adam_step(net: &mut Mlp, grads: &MlpGrads, state: &mut AdamState) -> Result<()> {
    let g = grads.tensors();
    let shapes_match = g.len() == state.first.len()
        && g.iter().zip(&state.first).all(|(a, b)| a.len() == b.len())
        && net.parameters().iter().zip(&g).all(|(p, q)| p.len() == q.len());
    if !shapes_match {
        return Err(CirrlError::Shape("gradient layout does not match parameters".into()));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let mut params = net.parameters_mut();
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(g)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
