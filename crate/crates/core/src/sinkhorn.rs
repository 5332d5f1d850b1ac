//! Balanced self-labelling targets via Sinkhorn-Knopp scaling.
//!
//! Given logits `O` (m × k) and a temperature `λ`, the kernel is
//! `K = softmax(O / λ)` row-wise. Alternating scalings
//!
//! ```text
//! u ← b ⊘ (K v),   v ← c ⊘ (Kᵀ u),   b = 1/m · 1_m,  c = 1/k · 1_k
//! ```
//!
//! run for a fixed number of iterations starting from `v = 1_k`, and the plan
//! `Q = diag(u) K diag(v)` is then row-normalised. Smaller `λ` gives sharper
//! rows; larger `λ` flatter ones. The result is a constant target: nothing
//! downstream differentiates through it.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::prob::{entropy, softmax_rows, DistributionBatch, TransportPlan};

/// Iteration count used in training.
pub const DEFAULT_ITERS: usize = 10;
/// Shorter schedule that also works for small batches.
pub const SHORT_ITERS: usize = 3;

const DENOM_FLOOR: f64 = 1e-30;

pub fn solve(logits: &DenseMatrix, lambda: f64, iters: usize) -> Result<TransportPlan> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    if iters == 0 {
        return Err(Error::invalid("sinkhorn needs at least one iteration"));
    }
    let (m, k) = logits.shape();
    if m == 0 || k == 0 {
        return Err(Error::invalid(format!("empty logits {m}x{k}")));
    }
    let kernel = softmax_rows(logits, lambda)?;
    let kernel = kernel.matrix();
    let b = 1.0 / m as f64;
    let c = 1.0 / k as f64;
    let mut u = vec![0.0; m];
    let mut v = vec![1.0; k];
    for _ in 0..iters {
        for (i, ui) in u.iter_mut().enumerate() {
            let kv: f64 = kernel.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
            *ui = b / kv.max(DENOM_FLOOR);
        }
        let mut ktu = vec![0.0; k];
        for (i, &ui) in u.iter().enumerate() {
            for (acc, &kij) in ktu.iter_mut().zip(kernel.row(i)) {
                *acc += kij * ui;
            }
        }
        for (vj, s) in v.iter_mut().zip(&ktu) {
            *vj = c / s.max(DENOM_FLOOR);
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NumericFailure(format!("sinkhorn scaling diverged at lambda {lambda}")));
        }
    }
    let mut q = kernel.clone();
    for (i, &ui) in u.iter().enumerate() {
        let row = q.row_mut(i);
        for (x, &vj) in row.iter_mut().zip(&v) {
            *x *= ui * vj;
        }
        let total: f64 = row.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::NumericFailure(format!("sinkhorn row {i} has mass {total}")));
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    Ok(DistributionBatch::new_unchecked(q))
}

/// [`solve`] plus the per-row entropy of the plan.
pub fn solve_with_entropy(logits: &DenseMatrix, lambda: f64, iters: usize) -> Result<(TransportPlan, f64)> {
    let q = solve(logits, lambda, iters)?;
    let h = entropy(&q);
    Ok((q, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_gaussian, Rng};

    /// Log-domain Sinkhorn run to a fixed point; independent of `solve`.
    fn oracle(logits: &DenseMatrix, lambda: f64) -> Vec<Vec<f64>> {
        let (m, k) = logits.shape();
        let log_k: Vec<Vec<f64>> = logits
            .row_iter()
            .map(|r| {
                let s: Vec<f64> = r.iter().map(|x| x / lambda).collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + s.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                s.iter().map(|x| x - lse).collect()
            })
            .collect();
        let lse = |xs: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = xs.collect();
            let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
        };
        let (lb, lc) = (-(m as f64).ln(), -(k as f64).ln());
        let mut f = vec![0.0; m];
        let mut g = vec![0.0; k];
        for _ in 0..100_000 {
            let old = g.clone();
            for i in 0..m {
                f[i] = lb - lse(&mut (0..k).map(|j| log_k[i][j] + g[j]));
            }
            for j in 0..k {
                g[j] = lc - lse(&mut (0..m).map(|i| log_k[i][j] + f[i]));
            }
            if g.iter().zip(&old).all(|(a, b)| (a - b).abs() < 1e-15) {
                break;
            }
        }
        (0..m)
            .map(|i| {
                let row: Vec<f64> = (0..k).map(|j| (log_k[i][j] + f[i] + g[j]).exp()).collect();
                let s: f64 = row.iter().sum();
                row.iter().map(|x| x / s).collect()
            })
            .collect()
    }

    #[test]
    fn uniform_kernel_is_a_fixed_point() {
        for lambda in [0.1, 0.5, 1.0, 3.0] {
            let q = solve(&DenseMatrix::filled(5, 4, 2.5), lambda, 1).unwrap();
            assert!(q.as_slice().iter().all(|&x| (x - 0.25).abs() < 1e-15));
            let (_, h) = solve_with_entropy(&DenseMatrix::zeros(5, 4), lambda, 1).unwrap();
            assert!((h - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_logits_give_permutation_plan() {
        let o = DenseMatrix::identity(3).scale(10.0);
        let (q, h) = solve_with_entropy(&o, 1.0, 50).unwrap();
        let exact = oracle(&o, 1.0);
        for i in 0..3 {
            assert!(q.get(i, i) >= 0.99);
            for j in 0..3 {
                assert!((q.get(i, j) - exact[i][j]).abs() < 1e-9);
            }
        }
        // oracle entropy: 3 rows of [1-2e, e, e] with e ≈ 4.5e-5
        let h_oracle: f64 = exact.iter().flatten().map(|p| -p * p.ln()).sum::<f64>() / 3.0;
        assert!((h - h_oracle).abs() < 1e-9);
        assert!(h < 1e-3);
    }

    #[test]
    fn short_run_meets_column_marginals() {
        let o = sample_gaussian(&mut Rng::new(5), 4, 2).unwrap();
        let q = solve(&o, 0.5, 10).unwrap();
        let exact = oracle(&o, 0.5);
        for (j, mean) in q.col_means().iter().enumerate() {
            assert!((mean - 0.5).abs() <= 1e-3, "column {j} mean {mean}");
            let exact_mean = exact.iter().map(|r| r[j]).sum::<f64>() / 4.0;
            assert!((exact_mean - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn converges_to_the_oracle() {
        let o = sample_gaussian(&mut Rng::new(8), 12, 5).unwrap().scale(2.0);
        let q = solve(&o, 0.7, 2000).unwrap();
        let exact = oracle(&o, 0.7);
        for i in 0..12 {
            for j in 0..5 {
                assert!((q.get(i, j) - exact[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn temperature_orders_entropy() {
        let o = sample_gaussian(&mut Rng::new(3), 32, 8).unwrap().scale(3.0);
        let (_, h_hi) = solve_with_entropy(&o, 1.0, 10).unwrap();
        let (_, h_lo) = solve_with_entropy(&o, 0.5, 10).unwrap();
        assert!(h_hi >= h_lo);
    }

    #[test]
    fn rejects_bad_arguments() {
        let o = DenseMatrix::zeros(2, 2);
        assert!(solve(&o, 0.0, 10).is_err());
        assert!(solve(&o, f64::NAN, 10).is_err());
        assert!(solve(&o, 1.0, 0).is_err());
        assert!(solve(&DenseMatrix::zeros(0, 2), 1.0, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let o = sample_gaussian(&mut Rng::new(1), 16, 6).unwrap();
        let a = solve(&o, 0.3, 10).unwrap();
        let b = solve(&o, 0.3, 10).unwrap();
        let bits = |q: &TransportPlan| q.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
