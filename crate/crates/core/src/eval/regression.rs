//! Least-squares fit from features to continuous targets.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const RIDGE: f64 = 1e-8;

/// Residual sum of squares of the ridge-regularised least-squares fit
/// `targets ≈ [Z, 1] β`, summed over all target columns.
pub fn linear_regression_rss(z: &DenseMatrix, targets: &DenseMatrix) -> Result<f64> {
    let (n, l) = z.shape();
    if targets.rows() != n {
        return Err(Error::invalid(format!("{} target rows for {n} feature rows", targets.rows())));
    }
    if n == 0 || targets.cols() == 0 {
        return Err(Error::invalid("regression needs at least one row and one target"));
    }
    z.ensure_finite("regression features")?;
    targets.ensure_finite("regression targets")?;
    let x = design(z);
    let p = l + 1;
    let mut gram = x.t_matmul(&x)?;
    for i in 0..p {
        gram.set(i, i, gram.get(i, i) + RIDGE);
    }
    let chol = cholesky(&gram)?;
    let rhs = x.t_matmul(targets)?;
    let beta = cholesky_solve(&chol, &rhs);
    let fitted = x.matmul(&beta)?;
    Ok(targets.as_slice().iter().zip(fitted.as_slice()).map(|(y, f)| (y - f).powi(2)).sum())
}

fn design(z: &DenseMatrix) -> DenseMatrix {
    let (n, l) = z.shape();
    let mut x = DenseMatrix::filled(n, l + 1, 1.0);
    for i in 0..n {
        x.row_mut(i)[..l].copy_from_slice(z.row(i));
    }
    x
}

/// Lower-triangular `L` with `L Lᵀ = a`.
fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    let p = a.rows();
    let mut l = DenseMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if !(d > 0.0) {
                    return Err(Error::NumericFailure(format!("normal equations not positive definite at pivot {i}")));
                }
                l.set(i, i, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &DenseMatrix, rhs: &DenseMatrix) -> DenseMatrix {
    let p = l.rows();
    let mut out = rhs.clone();
    for c in 0..rhs.cols() {
        for i in 0..p {
            let s: f64 = (0..i).map(|k| l.get(i, k) * out.get(k, c)).sum();
            out.set(i, c, (out.get(i, c) - s) / l.get(i, i));
        }
        for i in (0..p).rev() {
            let s: f64 = (i + 1..p).map(|k| l.get(k, i) * out.get(k, c)).sum();
            out.set(i, c, (out.get(i, c) - s) / l.get(i, i));
        }
    }
    out
}
