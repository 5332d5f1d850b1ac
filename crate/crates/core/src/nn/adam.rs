use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

use super::{Model, ParamGradients};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators, shaped like [`Model::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<DenseMatrix>,
    pub second: Vec<DenseMatrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<DenseMatrix> = model.tensors().iter().map(|t| DenseMatrix::zeros(t.rows(), t.cols())).collect();
        Self { first: zeros.clone(), second: zeros, step: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }
}

/// One bias-corrected Adam update of every learnable tensor.
pub fn adam_step(model: &mut Model, grads: &ParamGradients, state: &mut AdamState, lr: f64) -> Result<()> {
    let mut params = model.tensors_mut();
    if params.len() != grads.tensors.len() || params.len() != state.first.len() {
        return Err(Error::InvalidState(format!(
            "adam: {} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.tensors.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&grads.tensors).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::InvalidState(format!("adam: tensor {i} shape mismatch")));
        }
    }
    if !grads.is_finite() {
        return Err(Error::Divergence {
            step: state.step as usize,
            reason: "non-finite gradient reached the optimiser".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(&grads.tensors).zip(state.first.iter_mut().zip(state.second.iter_mut())) {
        let ps = p.as_mut_slice();
        let ms = m.as_mut_slice();
        let vs = v.as_mut_slice();
        for (j, &gj) in g.as_slice().iter().enumerate() {
            ms[j] = b1 * ms[j] + (1.0 - b1) * gj;
            vs[j] = b2 * vs[j] + (1.0 - b2) * gj * gj;
            let m_hat = ms[j] / c1;
            let v_hat = vs[j] / c2;
            ps[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
