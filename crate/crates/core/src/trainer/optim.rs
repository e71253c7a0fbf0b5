use super::{Result, TrainError};
use crate::tensor::Tensor;

/// One SGD step with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Contract(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(TrainError::Contract(format!(
                "sgd_step: shapes {:?}, {:?}, {:?} differ",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pv, gv), vv) in p.values_mut().iter_mut().zip(g.values()).zip(v.values_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Gradient reversal strength at training progress `p ∈ [0, 1]`:
/// `2 / (1 + exp(−10p)) − 1`.
pub fn grl_lambda(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}
