//! Adam for parameter training (standard formulation with step-count bias
//! correction). The inference-time action update rules live in `inference`
//! and are deliberately different.

use super::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment buffers, one pair per parameter tensor, plus the
/// global step count used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_sizes: &[usize]) -> Self {
        AdamState {
            config,
            step: 0,
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(config, &sizes)
    }
}

/// One Adam update over a flat list of parameter tensors. `grads[i]` must
/// align with `params[i]`; a missing gradient (`None`) leaves that tensor
/// untouched while still advancing its moments' shapes consistently.
pub fn adam_param_step(params: &mut [&mut Tensor], grads: &[Option<&[f64]>], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state built for different params");
    state.step += 1;
    let t = state.step as i32;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = match grads[i] {
            Some(g) => g,
            None => continue,
        };
        assert_eq!(g.len(), p.len(), "gradient size mismatch at param {i}");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..g.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.values[j] -= c.lr * mhat / (vhat.sqrt() + c.epsilon);
        }
    }
}
