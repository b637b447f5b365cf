use std::collections::BTreeMap;

use crate::autograd::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParameterStore,
    pub v: ParameterStore,
}

impl AdamState {
    /// Zero moments shaped like `params`, with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(params: &ParameterStore, learning_rate: f64) -> Self {
        let zeros = |p: &ParameterStore| {
            let mut s = ParameterStore::new();
            for (k, t) in p.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

/// One bias-corrected Adam update. Every parameter needs a finite gradient;
/// nothing is modified when a check fails.
pub fn adam_step(params: &mut ParameterStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
    for (path, p) in params.iter() {
        let g = grads.get(path).ok_or_else(|| Error::MissingParam(format!("gradient for {path}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                detail: path.clone(),
            });
        }
        if !state.m.contains(path) {
            return Err(Error::MissingParam(format!("optimizer state for {path}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.eps);
    for (path, p) in params.iter_mut() {
        let g = grads[path].data();
        let m = state.m.get_mut(path)?.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v.get_mut(path)?.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let (m, v) = (state.m.get(path)?.data(), state.v.get(path)?.data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
