//! Row-stochastic batches and the information-theoretic primitives on them.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Floor applied to probabilities inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-9;

/// An `m × k` matrix whose rows lie on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionBatch(DenseMatrix);

/// Sinkhorn targets share the representation of model predictions.
pub type TransportPlan = DistributionBatch;

impl DistributionBatch {
    pub fn new(mat: DenseMatrix) -> Result<Self> {
        for (i, row) in mat.row_iter().enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self(mat))
    }

    /// Caller guarantees the simplex invariant.
    pub(crate) fn new_unchecked(mat: DenseMatrix) -> Self {
        debug_assert!(Self::new(mat.clone()).is_ok());
        Self(mat)
    }

    pub fn uniform(m: usize, k: usize) -> Self {
        Self(DenseMatrix::filled(m, k, 1.0 / k as f64))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }
}

impl Deref for DistributionBatch {
    type Target = DenseMatrix;

    fn deref(&self) -> &DenseMatrix {
        &self.0
    }
}

/// Row-wise softmax of `logits / temperature`, stabilised by the row max.
pub fn softmax_rows(logits: &DenseMatrix, temperature: f64) -> Result<DistributionBatch> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    logits.ensure_finite("logits")?;
    let mut out = logits.clone();
    let cols = out.cols();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
        debug_assert!(cols == 0 || total >= 1.0);
    }
    Ok(DistributionBatch(out))
}

/// Per-row average Shannon entropy (nats), with `0 log 0 = 0`.
pub fn entropy(dist: &DistributionBatch) -> f64 {
    let m = dist.rows();
    if m == 0 {
        return 0.0;
    }
    let total: f64 = dist
        .as_slice()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    (total / m as f64).max(0.0)
}

/// Batch-mean `KL(pi || gamma)`; `gamma` is floored at [`LOG_FLOOR`].
pub fn kl_divergence(pi: &DistributionBatch, gamma: &DistributionBatch) -> Result<f64> {
    if pi.shape() != gamma.shape() {
        return Err(Error::invalid(format!(
            "kl_divergence: shape mismatch {:?} vs {:?}",
            pi.shape(),
            gamma.shape()
        )));
    }
    let m = pi.rows();
    if m == 0 {
        return Ok(0.0);
    }
    let total: f64 = pi
        .as_slice()
        .iter()
        .zip(gamma.as_slice())
        .map(|(&p, &g)| {
            if p <= 0.0 || p == g {
                0.0
            } else {
                p * (p.ln() - g.max(LOG_FLOOR).ln())
            }
        })
        .sum();
    Ok(total / m as f64)
}

/// Gradient of `KL(target || softmax(logits))` (batch mean) with respect to
/// the logits, given `pred = softmax(logits)`: `(pred - target) / m`.
pub fn kl_logit_grad(target: &DistributionBatch, pred: &DistributionBatch) -> Result<DenseMatrix> {
    let m = pred.rows().max(1) as f64;
    Ok(pred.sub(target)?.scale(1.0 / m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: &[Vec<f64>]) -> DistributionBatch {
        DistributionBatch::new(DenseMatrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax_rows(&DenseMatrix::zeros(1, 3), 1.0).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_rows(&DenseMatrix::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap(), 1.0).unwrap();
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        let e = std::f64::consts::E;
        let p = softmax_rows(&DenseMatrix::from_rows(&[vec![2.0, 0.0]]).unwrap(), 2.0).unwrap();
        assert!((p.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let bad = DenseMatrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(softmax_rows(&bad, 1.0).is_err());
        assert!(softmax_rows(&DenseMatrix::zeros(1, 2), 0.0).is_err());
        assert!(softmax_rows(&DenseMatrix::zeros(1, 2), -1.0).is_err());
    }

    #[test]
    fn entropy_cases() {
        let u = DistributionBatch::uniform(1, 100);
        assert!((entropy(&u) - 100f64.ln()).abs() < 1e-12);
        assert!((entropy(&u) - 4.6052).abs() < 1e-4);
        assert_eq!(entropy(&batch(&[vec![0.0, 1.0, 0.0]])), 0.0);
        let two = DistributionBatch::uniform(2, 4);
        assert!((entropy(&two) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_cases() {
        let p = batch(&[vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0]]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let kl = kl_divergence(&batch(&[vec![1.0, 0.0]]), &batch(&[vec![0.5, 0.5]])).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) = 0.5 ln(25/9), evaluated independently of the sum
        let kl = kl_divergence(&batch(&[vec![0.5, 0.5]]), &batch(&[vec![0.9, 0.1]])).unwrap();
        let oracle = 0.5 * (25.0f64 / 9.0).ln();
        assert!((kl - oracle).abs() < 1e-14);
        assert!((kl - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_shape_mismatch() {
        let a = DistributionBatch::uniform(2, 3);
        let b = DistributionBatch::uniform(3, 3);
        assert!(kl_divergence(&a, &b).is_err());
    }

    #[test]
    fn kl_floor_keeps_zero_support_finite() {
        let kl = kl_divergence(&batch(&[vec![0.5, 0.5]]), &batch(&[vec![1.0, 0.0]])).unwrap();
        assert!(kl.is_finite() && kl > 10.0);
    }

    fn logits(m: usize, k: usize) -> impl Strategy<Value = DenseMatrix> {
        prop::collection::vec(-20.0f64..20.0, m * k).prop_map(move |v| DenseMatrix::from_vec(m, k, v).unwrap())
    }

    fn small_logits(m: usize, k: usize) -> impl Strategy<Value = DenseMatrix> {
        prop::collection::vec(-4.0f64..4.0, m * k).prop_map(move |v| DenseMatrix::from_vec(m, k, v).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(o in logits(4, 7), t in 0.05f64..5.0) {
            let p = softmax_rows(&o, t).unwrap();
            for s in p.row_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn entropy_sharpens_as_temperature_drops(o in logits(3, 6), t in 0.1f64..4.0, dt in 0.0f64..2.0) {
            let hot = entropy(&softmax_rows(&o, t + dt).unwrap());
            let cold = entropy(&softmax_rows(&o, t).unwrap());
            prop_assert!(cold <= hot + 1e-12);
            prop_assert!(hot <= 6f64.ln() + 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(a in logits(5, 4), b in logits(5, 4)) {
            let p = softmax_rows(&a, 1.0).unwrap();
            let q = softmax_rows(&b, 1.0).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= -1e-9);
            if kl <= 1e-9 {
                for (x, y) in p.as_slice().iter().zip(q.as_slice()) {
                    prop_assert!((x - y).abs() < 1e-3);
                }
            }
        }

        #[test]
        fn kl_grad_matches_finite_differences(o in small_logits(2, 3), t in small_logits(2, 3)) {
            let target = softmax_rows(&t, 1.0).unwrap();
            let pred = softmax_rows(&o, 1.0).unwrap();
            let g = kl_logit_grad(&target, &pred).unwrap();
            let h = 1e-6;
            for i in 0..6 {
                let mut plus = o.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = o.clone();
                minus.as_mut_slice()[i] -= h;
                let fp = kl_divergence(&target, &softmax_rows(&plus, 1.0).unwrap()).unwrap();
                let fm = kl_divergence(&target, &softmax_rows(&minus, 1.0).unwrap()).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                prop_assert!((fd - g.as_slice()[i]).abs() < 1e-6 + 1e-4 * fd.abs());
            }
        }
    }
}
