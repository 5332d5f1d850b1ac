//! Lloyd's k-means with k-means++ seeding and best-of-restarts selection.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, DenseMatrix};
use crate::rng::Rng;

pub const DEFAULT_RESTARTS: usize = 20;
pub const MAX_LLOYD_ITERS: usize = 300;
pub const REL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: DenseMatrix,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    /// Restart that produced this solution.
    pub restart: usize,
}

/// Runs `restarts` seeded Lloyd passes and keeps the lowest inertia; ties go
/// to the earliest restart, so the result does not depend on thread count.
pub fn kmeans_cluster(z: &DenseMatrix, k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    let n = z.rows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if restarts == 0 {
        return Err(Error::invalid("k-means needs at least one restart"));
    }
    z.ensure_finite("k-means input")?;
    let root = Rng::new(seed);
    let runs: Vec<KMeansResult> = (0..restarts)
        .into_par_iter()
        .map(|r| lloyd(z, k, &mut root.split(&format!("kmeans-restart-{r}")), r))
        .collect();
    Ok(runs.into_iter().reduce(|best, r| if r.inertia < best.inertia { r } else { best }).expect("restarts >= 1"))
}

fn seed_plus_plus(z: &DenseMatrix, k: usize, rng: &mut Rng) -> DenseMatrix {
    let n = z.rows();
    let mut centroids = DenseMatrix::zeros(k, z.cols());
    centroids.row_mut(0).copy_from_slice(z.row(rng.index(n)));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(z.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.index(n)
        };
        centroids.row_mut(c).copy_from_slice(z.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(z.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn assign(z: &DenseMatrix, centroids: &DenseMatrix, assignment: &mut [usize]) -> (f64, Vec<f64>) {
    let mut inertia = 0.0;
    let mut dist = vec![0.0; z.rows()];
    for (i, a) in assignment.iter_mut().enumerate() {
        let (best, d) = (0..centroids.rows())
            .map(|c| (c, squared_distance(z.row(i), centroids.row(c))))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        *a = best;
        dist[i] = d;
        inertia += d;
    }
    (inertia, dist)
}

fn lloyd(z: &DenseMatrix, k: usize, rng: &mut Rng, restart: usize) -> KMeansResult {
    let (n, d) = z.shape();
    let mut centroids = seed_plus_plus(z, k, rng);
    let mut assignment = vec![0; n];
    let (mut inertia, mut dist) = assign(z, &centroids, &mut assignment);
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums.row_mut(a).iter_mut().zip(z.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // empty cluster: move it onto the point worst served so far
                let far = (0..n).fold(0, |b, i| if dist[i] > dist[b] { i } else { b });
                centroids.row_mut(c).copy_from_slice(z.row(far));
                dist[far] = 0.0;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        let (next, next_dist) = assign(z, &centroids, &mut assignment);
        dist = next_dist;
        let change = (inertia - next).abs() / inertia.max(f64::MIN_POSITIVE);
        inertia = next;
        if change < REL_TOL {
            break;
        }
    }
    KMeansResult { assignment, centroids, inertia, restart }
}
