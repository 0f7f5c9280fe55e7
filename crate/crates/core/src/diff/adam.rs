use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First/second moment buffers, one per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |id| vec![0.0; store.get(id).numel()];
        Self { step: 0, m: store.ids().map(zeros).collect(), v: store.ids().map(zeros).collect() }
    }
}

/// One AdamW update with decoupled weight decay. Parameters without a
/// gradient entry, and frozen parameters, are left untouched.
pub fn adam_step(store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        if !store.is_trainable(*id) {
            continue;
        }
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let p = &mut store.get_mut(*id).data;
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= cfg.lr * cfg.weight_decay * p[i];
            p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
