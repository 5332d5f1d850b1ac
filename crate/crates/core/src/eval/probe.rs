//! Linear probe: softmax regression on frozen features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 1e-3, batch_size: 256, seed: 0 }
    }
}

/// Trains `W, b` with Adam on softmax cross-entropy and returns test accuracy.
/// Features are standardised with training-split statistics; weights start at zero.
pub fn linear_probe(
    z_train: &DenseMatrix,
    y_train: &[usize],
    z_test: &DenseMatrix,
    y_test: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (n, l) = z_train.shape();
    if y_train.len() != n || y_test.len() != z_test.rows() {
        return Err(Error::invalid("probe labels do not match feature rows"));
    }
    if z_test.cols() != l {
        return Err(Error::invalid(format!("train features have {l} columns, test features {}", z_test.cols())));
    }
    if n == 0 || z_test.rows() == 0 {
        return Err(Error::invalid("probe needs non-empty train and test splits"));
    }
    let first = y_train[0];
    if y_train.iter().all(|&y| y == first) {
        return Err(Error::invalid("probe training labels contain a single class"));
    }
    if !(cfg.lr >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::invalid("probe needs lr >= 0 and batch_size >= 1"));
    }
    let classes = y_train.iter().chain(y_test).max().expect("non-empty") + 1;

    let mean = z_train.col_means();
    let mut std = vec![0.0; l];
    for row in z_train.row_iter() {
        for j in 0..l {
            std[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    let standardise = |z: &DenseMatrix| z.map_rows(|row| for j in 0..l { row[j] = (row[j] - mean[j]) / std[j] });
    let xtr = standardise(z_train);
    let xte = standardise(z_test);

    let mut w = DenseMatrix::zeros(l, classes);
    let mut b = vec![0.0; classes];
    let mut mw = DenseMatrix::zeros(l, classes);
    let mut vw = DenseMatrix::zeros(l, classes);
    let mut mb = vec![0.0; classes];
    let mut vb = vec![0.0; classes];
    let mut rng = Rng::new(cfg.seed).split("probe");
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0i32;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xtr.select_rows(chunk);
            let mut g = xb.matmul(&w)?;
            g.add_row_vector(&b);
            let m = chunk.len() as f64;
            for (r, &i) in chunk.iter().enumerate() {
                let row = g.row_mut(r);
                softmax_in_place(row);
                row[y_train[i]] -= 1.0;
                row.iter_mut().for_each(|v| *v /= m);
            }
            let gw = xb.t_matmul(&g)?;
            let gb = g.col_sums();
            t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let update = |p: &mut f64, m: &mut f64, v: &mut f64, grad: f64| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
                *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            };
            for (((p, m), v), &gv) in w.as_mut_slice().iter_mut().zip(mw.as_mut_slice()).zip(vw.as_mut_slice()).zip(gw.as_slice()) {
                update(p, m, v, gv);
            }
            for (((p, m), v), &gv) in b.iter_mut().zip(&mut mb).zip(&mut vb).zip(&gb) {
                update(p, m, v, gv);
            }
        }
    }
    if !w.is_finite() {
        return Err(Error::NumericFailure("probe weights diverged".into()));
    }
    let mut scores = xte.matmul(&w)?;
    scores.add_row_vector(&b);
    let correct = scores.row_iter().zip(y_test).filter(|(row, &y)| argmax(row) == y).count();
    Ok(correct as f64 / y_test.len() as f64)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// First index of the maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b })
}
