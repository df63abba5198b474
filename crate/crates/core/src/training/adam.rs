//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::model::TensorData;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter group, aligned with the
/// group's canonical visitation order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One Adam update over a parameter group. `params` and `grads` must align
/// with the state's tensor list.
pub fn adam_step(
    cfg: &AdamConfig,
    state: &mut AdamState,
    params: &mut [(String, &mut TensorData)],
    grads: &[Vec<f64>],
) {
    assert_eq!(params.len(), grads.len(), "gradient count mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state count mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((_, param), grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(param.data.len(), grad.len(), "gradient size mismatch");
        for ((p, &g), (mi, vi)) in param
            .data
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Jointly rescales the selected gradient tensors so their combined
/// Euclidean norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(
    grads: &mut [Vec<f64>],
    select: impl Fn(usize) -> bool,
    max_norm: f64,
) -> f64 {
    assert!(max_norm > 0.0);
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if select(i) {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (i, g) in grads.iter_mut().enumerate() {
            if select(i) {
                for x in g {
                    *x *= scale;
                }
            }
        }
    }
    norm
}
