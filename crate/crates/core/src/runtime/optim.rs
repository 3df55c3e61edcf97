//! Adam with global-norm clipping and a step learning-rate schedule.

use ndarray::{Array2, Zip};

use super::RuntimeError;
use crate::network::ExpertParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ExpertParams) -> Self {
        let zeros: Vec<Array2<f64>> = params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`; returns the factor.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        scale
    } else {
        1.0
    }
}

/// One bias-corrected Adam update.
pub fn optimizer_step(
    params: &mut ExpertParams,
    grads: &mut [Array2<f64>],
    state: &mut AdamState,
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<(), RuntimeError> {
    if grads.len() != params.tensors.len()
        || grads.iter().zip(&params.tensors).any(|(g, t)| g.dim() != t.dim())
    {
        return Err(RuntimeError::Config("gradient shapes do not match the parameters".into()));
    }
    for (slot, g) in grads.iter().enumerate() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(RuntimeError::NonFiniteGradient { tensor: slot, index });
        }
    }
    if let Some(max) = clip_norm {
        clip_global_norm(grads, max);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((theta, g), (m, v)) in params
        .tensors
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        Zip::from(theta).and(g).and(m).and(v).for_each(|theta, &g, m, v| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        });
    }
    Ok(())
}

/// `lr0 · factor^⌊epoch / interval⌋`.
pub fn lr_at(epoch: usize, lr0: f64, factor: f64, interval: usize) -> f64 {
    let k = epoch / interval.max(1);
    lr0 * factor.powi(k as i32)
}
