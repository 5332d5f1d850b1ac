//! Clustering agreement scores: best-mapping accuracy, NMI and ARI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C_pred × C_true` co-occurrence counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::invalid(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let rows = pred.iter().max().map_or(0, |m| m + 1);
        let cols = truth.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; cols]; rows];
        for (&p, &t) in pred.iter().zip(truth) {
            counts[p][t] += 1;
        }
        Ok(Self { counts, n: pred.len() as u64 })
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_totals(&self) -> Vec<u64> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringScores {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn clustering_metrics(pred: &[usize], truth: &[usize]) -> Result<ClusteringScores> {
    let table = ContingencyTable::new(pred, truth)?;
    Ok(ClusteringScores { acc: best_map_accuracy(&table), nmi: nmi(&table), ari: ari(&table) })
}

/// Fraction matched under the best one-to-one label mapping.
pub fn best_map_accuracy(table: &ContingencyTable) -> f64 {
    if table.n == 0 {
        return 0.0;
    }
    let rows = table.counts.len();
    let cols = table.counts.first().map_or(0, Vec::len);
    let size = rows.max(cols);
    let peak = table.counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost: Vec<Vec<i64>> = (0..size)
        .map(|i| {
            (0..size)
                .map(|j| peak - if i < rows && j < cols { table.counts[i][j] as i64 } else { 0 })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let matched: u64 = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < rows && j < cols)
        .map(|(i, &j)| table.counts[i][j])
        .sum();
    matched as f64 / table.n as f64
}

/// Minimum-cost perfect matching on a square matrix; returns the column
/// assigned to each row. Shortest augmenting path with potentials, `O(n³)`.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; index 0 is the virtual source
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

fn entropy_of(totals: &[u64], n: f64) -> f64 {
    totals.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum()
}

/// `I(pred; truth) / √(H(pred)·H(truth))`. Two single-cluster labelings score
/// 1; exactly one single-cluster labeling scores 0.
pub fn nmi(table: &ContingencyTable) -> f64 {
    if table.n == 0 {
        return 0.0;
    }
    let n = table.n as f64;
    let rows = table.row_totals();
    let cols = table.col_totals();
    let hp = entropy_of(&rows, n);
    let ht = entropy_of(&cols, n);
    if hp == 0.0 && ht == 0.0 {
        return 1.0;
    }
    if hp == 0.0 || ht == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    (mi / (hp * ht).sqrt()).clamp(0.0, 1.0)
}

fn pairs(c: u64) -> f64 {
    c as f64 * (c as f64 - 1.0) / 2.0
}

/// Adjusted Rand index by pair counting. Returns 1 when the expected and
/// maximum index coincide (both labelings trivial).
pub fn ari(table: &ContingencyTable) -> f64 {
    let index: f64 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let a: f64 = table.row_totals().into_iter().map(pairs).sum();
    let b: f64 = table.col_totals().into_iter().map(pairs).sum();
    let total = pairs(table.n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = a * b / total;
    let max = (a + b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
