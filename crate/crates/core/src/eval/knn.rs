//! Neighbourhood label agreement on the embedding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, DenseMatrix};

pub const DEFAULT_NEIGHBOURS: usize = 21;

/// Fraction of points whose `neighbours` nearest other points (Euclidean,
/// distance ties by index) vote for the point's own label by plurality,
/// vote ties going to the smallest label.
pub fn graph_eval_knn(z: &DenseMatrix, labels: &[usize], neighbours: usize) -> Result<f64> {
    let n = z.rows();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} points", labels.len())));
    }
    if neighbours == 0 || n <= neighbours {
        return Err(Error::invalid(format!("need n > neighbours >= 1, got n={n}, neighbours={neighbours}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let hits = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (squared_distance(z.row(i), z.row(j)), j)).collect();
            let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(neighbours - 1, by_distance);
            let mut votes = vec![0usize; classes];
            for &(_, j) in &cand[..neighbours] {
                votes[labels[j]] += 1;
            }
            let winner = votes.iter().enumerate().fold(0, |b, (c, &v)| if v > votes[b] { c } else { b });
            usize::from(winner == labels[i])
        })
        .sum::<usize>();
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_gaussian, Rng};
    use proptest::prelude::*;

    fn brute_force(z: &DenseMatrix, labels: &[usize], k: usize) -> f64 {
        let n = z.rows();
        let mut hits = 0;
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                squared_distance(z.row(i), z.row(a))
                    .partial_cmp(&squared_distance(z.row(i), z.row(b)))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut votes = std::collections::BTreeMap::new();
            for &j in &order[..k] {
                *votes.entry(labels[j]).or_insert(0) += 1;
            }
            let top = *votes.values().max().unwrap();
            let winner = *votes.iter().find(|(_, &v)| v == top).unwrap().0;
            hits += usize::from(winner == labels[i]);
        }
        hits as f64 / n as f64
    }

    #[test]
    fn separated_clusters_score_one() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = Rng::new(3);
        for c in 0..2 {
            for _ in 0..25 {
                rows.push(vec![100.0 * c as f64 + rng.normal(), rng.normal()]);
                labels.push(c);
            }
        }
        let z = DenseMatrix::from_rows(&rows).unwrap();
        assert_eq!(graph_eval_knn(&z, &labels, 21).unwrap(), 1.0);
    }

    #[test]
    fn constant_labels_score_one() {
        let z = sample_gaussian(&mut Rng::new(4), 30, 3).unwrap();
        assert_eq!(graph_eval_knn(&z, &[2; 30], 21).unwrap(), 1.0);
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let z = sample_gaussian(&mut rng, 30, 2).unwrap();
            let labels: Vec<usize> = (0..30).map(|_| rng.index(3)).collect();
            assert_eq!(graph_eval_knn(&z, &labels, 21).unwrap(), brute_force(&z, &labels, 21));
        }
        // coincident points exercise the index tie-break
        let z = DenseMatrix::from_rows(&vec![vec![0.0]; 30]).unwrap();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        assert_eq!(graph_eval_knn(&z, &labels, 21).unwrap(), brute_force(&z, &labels, 21));
    }

    #[test]
    fn rejects_too_few_points() {
        let z = sample_gaussian(&mut Rng::new(1), 21, 2).unwrap();
        assert!(graph_eval_knn(&z, &[0; 21], 21).is_err());
        assert!(graph_eval_knn(&z, &[0; 20], 5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rigid_motion_invariant(seed in 0u64..1000, angle in 0.0f64..6.28, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let z = sample_gaussian(&mut rng, 30, 2).unwrap();
            let labels: Vec<usize> = (0..30).map(|_| rng.index(3)).collect();
            let (s, c) = angle.sin_cos();
            let moved = DenseMatrix::from_rows(
                &z.row_iter().map(|r| vec![c * r[0] - s * r[1] + tx, s * r[0] + c * r[1] + ty]).collect::<Vec<_>>(),
            ).unwrap();
            prop_assert_eq!(graph_eval_knn(&z, &labels, 5).unwrap(), graph_eval_knn(&moved, &labels, 5).unwrap());
        }
    }
}
