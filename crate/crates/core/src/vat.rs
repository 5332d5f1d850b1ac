//! Virtual-adversarial self-transformation.
//!
//! For a batch `B` with clean predictions `P` (held constant):
//!
//! 1. draw `R ~ N(0, 1)`, rescale every row to ℓ2-norm `ξ`, and predict
//!    `P_r = softmax(E(B + R))`;
//! 2. take `G = ∇_R KL(P || P_r)`, rescale every row of `G` to ℓ2-norm `ε`
//!    to get `R_adv`, and predict on `B + R_adv`.
//!
//! Rows whose gradient vanishes (`‖g‖ < 1e-12`) fall back to the random
//! direction, scaled to `ε`. All forward passes run in train mode, each with
//! its own batch statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{l2_norm, DenseMatrix};
use crate::nn::{ForwardTape, Mode, Model};
use crate::prob::{kl_logit_grad, softmax_rows, DistributionBatch};
use crate::rng::{sample_gaussian, Rng};

/// Perturbations, one row per sample.
pub type PerturbationBatch = DenseMatrix;

/// Gradient norms below this take the random-direction fallback.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VatConfig {
    /// Norm of the random probe perturbation.
    pub xi: f64,
    /// Norm of the adversarial perturbation.
    pub epsilon: f64,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self { xi: 10.0, epsilon: 1.0 }
    }
}

impl VatConfig {
    fn check(&self) -> Result<()> {
        for (name, v) in [("xi", self.xi), ("epsilon", self.epsilon)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Result of one perturbed view.
#[derive(Clone, Debug)]
pub struct View {
    pub probs: DistributionBatch,
    pub logits: DenseMatrix,
    pub perturbation: PerturbationBatch,
    /// Tape of the perturbed forward pass, for backpropagating the training loss.
    pub tape: ForwardTape,
}

#[derive(Clone, Debug)]
pub struct VatOutput {
    pub view: View,
    /// The ξ-scaled random probe.
    pub random: PerturbationBatch,
    /// Mean ℓ2-norm of the per-sample KL gradients.
    pub mean_grad_norm: f64,
    /// Rows that used the random-direction fallback.
    pub degenerate_rows: usize,
}

/// Random unit-norm rows.
fn unit_directions(rng: &mut Rng, m: usize, d: usize) -> Result<DenseMatrix> {
    let mut r = sample_gaussian(rng, m, d)?;
    for i in 0..m {
        let row = r.row_mut(i);
        let n = l2_norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            // measure-zero event: fall back to the first axis
            row[0] = 1.0;
        }
    }
    Ok(r)
}

/// Forward pass on `batch + perturbation` in train mode.
pub fn perturbed_view(model: &Model, batch: &DenseMatrix, perturbation: PerturbationBatch) -> Result<View> {
    let input = batch.add(&perturbation)?;
    let fwd = model.forward(&input, Mode::Train)?;
    let probs = softmax_rows(&fwd.logits, 1.0)?;
    Ok(View { probs, logits: fwd.logits, perturbation, tape: fwd.tape })
}

/// Random-perturbation view: rows of `R` rescaled to norm `scale`.
pub fn random_view(model: &Model, batch: &DenseMatrix, scale: f64, rng: &mut Rng) -> Result<View> {
    let (m, d) = batch.shape();
    let r = unit_directions(rng, m, d)?.scale(scale);
    perturbed_view(model, batch, r)
}

pub fn vat_forward(
    model: &Model,
    batch: &DenseMatrix,
    anchor: &DistributionBatch,
    cfg: &VatConfig,
    rng: &mut Rng,
) -> Result<VatOutput> {
    cfg.check()?;
    let (m, d) = batch.shape();
    if anchor.shape() != (m, model.output_dim()) {
        return Err(Error::invalid(format!(
            "anchor is {:?}, expected ({m}, {})",
            anchor.shape(),
            model.output_dim()
        )));
    }
    let unit = unit_directions(rng, m, d)?;
    let random = unit.scale(cfg.xi);
    let probe = model.forward(&batch.add(&random)?, Mode::Train)?;
    let p_r = softmax_rows(&probe.logits, 1.0)?;
    let grad = model.backward_input(&probe.tape, &kl_logit_grad(anchor, &p_r)?)?;
    if !grad.is_finite() {
        return Err(Error::NumericFailure("VAT gradient is non-finite".into()));
    }

    let mut adv = DenseMatrix::zeros(m, d);
    let mut degenerate_rows = 0;
    let mut norm_sum = 0.0;
    for i in 0..m {
        let g = grad.row(i);
        let n = l2_norm(g);
        norm_sum += n;
        let out = adv.row_mut(i);
        if n < DEGENERATE_GRAD_NORM {
            degenerate_rows += 1;
            for (o, u) in out.iter_mut().zip(unit.row(i)) {
                *o = cfg.epsilon * u;
            }
        } else {
            for (o, gj) in out.iter_mut().zip(g) {
                *o = cfg.epsilon * gj / n;
            }
        }
    }
    let view = perturbed_view(model, batch, adv)?;
    Ok(VatOutput { view, random, mean_grad_norm: norm_sum / m.max(1) as f64, degenerate_rows })
}

/// Two adversarial views anchored on the same clean predictions, with
/// independently drawn probes.
pub fn two_view_vat(
    model: &Model,
    batch: &DenseMatrix,
    anchor: &DistributionBatch,
    cfg: &VatConfig,
    rng: &mut Rng,
) -> Result<[VatOutput; 2]> {
    let first = vat_forward(model, batch, anchor, cfg, rng)?;
    let second = vat_forward(model, batch, anchor, cfg, rng)?;
    Ok([first, second])
}
