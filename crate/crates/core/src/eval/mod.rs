//! Evaluation of frozen embeddings: linear probe, k-NN graph score, k-means
//! agreement (ACC/NMI/ARI) and regression RSS, plus the metrics report.
//!
//! Restarts and per-point work run on the rayon pool; results are gathered in
//! index order before reduction, so reports do not depend on thread count.

mod kmeans;
mod knn;
mod metrics;
mod probe;
mod regression;

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use kmeans::{kmeans_cluster, KMeansResult, DEFAULT_RESTARTS, MAX_LLOYD_ITERS, REL_TOL};
pub use knn::{graph_eval_knn, DEFAULT_NEIGHBOURS};
pub use metrics::{ari, best_map_accuracy, clustering_metrics, hungarian, nmi, ClusteringScores, ContingencyTable};
pub use probe::{linear_probe, ProbeConfig};
pub use regression::{linear_regression_rss, RIDGE};

use crate::data::hex;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::Rng;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Linear,
    Knn,
    Kmeans,
    Rss,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Linear, Metric::Knn, Metric::Kmeans, Metric::Rss];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Linear => "linear",
            Metric::Knn => "knn",
            Metric::Kmeans => "kmeans",
            Metric::Rss => "rss",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}; expected linear, knn, kmeans or rss")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metrics: BTreeSet<Metric>,
    pub probe: ProbeConfig,
    /// Fraction of rows held out for probe testing.
    pub test_fraction: f64,
    pub neighbours: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.into_iter().collect(),
            probe: ProbeConfig::default(),
            test_fraction: 0.2,
            neighbours: DEFAULT_NEIGHBOURS,
            kmeans_restarts: DEFAULT_RESTARTS,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(&json))
    }
}

/// Selected metrics only; unselected ones are absent from both JSON and CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub linear_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub knn21: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kmeans_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rss: Option<f64>,
    pub seed: u64,
    pub config_fingerprint: String,
}

impl MetricsReport {
    fn columns(&self) -> Vec<(&'static str, String)> {
        let mut cols = Vec::new();
        for (name, v) in [
            ("linear_acc", self.linear_acc),
            ("knn21", self.knn21),
            ("kmeans_acc", self.kmeans_acc),
            ("nmi", self.nmi),
            ("ari", self.ari),
            ("rss", self.rss),
        ] {
            if let Some(v) = v {
                cols.push((name, v.to_string()));
            }
        }
        cols.push(("seed", self.seed.to_string()));
        cols.push(("config_fingerprint", self.config_fingerprint.clone()));
        cols
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let cols = self.columns();
        writeln!(out, "{}", cols.iter().map(|c| c.0).collect::<Vec<_>>().join(","))?;
        writeln!(out, "{}", cols.iter().map(|c| c.1.as_str()).collect::<Vec<_>>().join(","))?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: &mut W) -> Result<()> {
        serde_json::to_writer_pretty(&mut *out, self)?;
        writeln!(out)?;
        Ok(())
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        let mut buf = Vec::new();
        self.write_json(&mut buf)?;
        std::fs::write(&json, &buf)?;
        buf.clear();
        self.write_csv(&mut buf)?;
        std::fs::write(&csv, &buf)?;
        Ok((json, csv))
    }
}

/// Seeded train/test row split; the first part of a permutation trains.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).split("eval-split").shuffle(&mut idx);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let test = idx.split_off(n - n_test);
    (idx, test)
}

/// Runs every selected metric on the embedding `z`. Label metrics need
/// `labels`; RSS needs `targets`.
pub fn evaluate(
    z: &DenseMatrix,
    labels: Option<&[usize]>,
    targets: Option<&DenseMatrix>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let mut missing = Vec::new();
    let needs_labels = cfg.metrics.iter().any(|m| *m != Metric::Rss);
    if needs_labels && labels.is_none() {
        missing.push("selected metrics need labels but the dataset has none".to_string());
    }
    if cfg.metrics.contains(&Metric::Rss) && targets.is_none() {
        missing.push("rss needs regression targets but the dataset has none".to_string());
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        missing.push(format!("test_fraction must lie in (0, 1), got {}", cfg.test_fraction));
    }
    if !missing.is_empty() {
        return Err(Error::Config(missing));
    }
    let mut report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        linear_acc: None,
        knn21: None,
        kmeans_acc: None,
        nmi: None,
        ari: None,
        rss: None,
        seed: cfg.seed,
        config_fingerprint: cfg.fingerprint(),
    };
    for metric in &cfg.metrics {
        match metric {
            Metric::Linear => {
                let y = labels.expect("checked");
                let (tr, te) = split_indices(z.rows(), cfg.test_fraction, cfg.seed);
                let pick = |idx: &[usize]| idx.iter().map(|&i| y[i]).collect::<Vec<_>>();
                let probe_cfg = ProbeConfig { seed: cfg.seed, ..cfg.probe.clone() };
                report.linear_acc =
                    Some(linear_probe(&z.select_rows(&tr), &pick(&tr), &z.select_rows(&te), &pick(&te), &probe_cfg)?);
            }
            Metric::Knn => report.knn21 = Some(graph_eval_knn(z, labels.expect("checked"), cfg.neighbours)?),
            Metric::Kmeans => {
                let y = labels.expect("checked");
                let classes = y.iter().max().map_or(1, |m| m + 1);
                let km = kmeans_cluster(z, classes, cfg.kmeans_restarts, cfg.seed)?;
                let scores = clustering_metrics(&km.assignment, y)?;
                report.kmeans_acc = Some(scores.acc);
                report.nmi = Some(scores.nmi);
                report.ari = Some(scores.ari);
            }
            Metric::Rss => report.rss = Some(linear_regression_rss(z, targets.expect("checked"))?),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_gaussian;

    #[test]
    fn subset_selection_is_exact() {
        let mut rng = Rng::new(1);
        let z = sample_gaussian(&mut rng, 60, 3).unwrap();
        let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let cfg = EvalConfig { metrics: [Metric::Knn].into_iter().collect(), ..Default::default() };
        let r = evaluate(&z, Some(&y), None, &cfg).unwrap();
        assert!(r.knn21.is_some());
        assert!(r.linear_acc.is_none() && r.kmeans_acc.is_none() && r.rss.is_none());
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("knn21,seed,config_fingerprint\n"));
        let mut json = Vec::new();
        r.write_json(&mut json).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert!(v.get("knn21").is_some() && v.get("linear_acc").is_none());
    }

    #[test]
    fn missing_inputs_listed_together() {
        let z = DenseMatrix::zeros(30, 2);
        let cfg = EvalConfig { test_fraction: 1.5, ..Default::default() };
        match evaluate(&z, None, None, &cfg) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (tr, te) = split_indices(100, 0.2, 4);
        assert_eq!((tr.len(), te.len()), (80, 20));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.2, 4), (tr, te));
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert!("tsne".parse::<Metric>().is_err());
    }
}
