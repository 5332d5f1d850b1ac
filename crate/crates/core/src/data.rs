//! Dataset container, CSV ingestion, normalisation and synthetic generators.
//!
//! CSV layout (no header): `x_1, …, x_d[, t_1, …, t_T][, label]`. Targets,
//! when requested, are the `T` columns after the features; the label, when
//! requested, is the last column and must be a non-negative integer.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::{l2_norm, DenseMatrix};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub labels: Option<Vec<usize>>,
    pub targets: Option<DenseMatrix>,
    pub name: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        x: DenseMatrix,
        labels: Option<Vec<usize>>,
        targets: Option<DenseMatrix>,
        name: impl Into<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!("dataset must be non-empty, got {n}x{d}")));
        }
        x.ensure_finite("features")?;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} rows", l.len())));
            }
        }
        if let Some(t) = &targets {
            if t.rows() != n {
                return Err(Error::invalid(format!("{} target rows for {n} rows", t.rows())));
            }
            t.ensure_finite("targets")?;
        }
        Ok(Self { x, labels, targets, name: name.into(), provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Number of classes (`max label + 1`), if labelled.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// SHA-256 over the little-endian bytes of features, targets and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.x.as_slice() {
            h.update(v.to_le_bytes());
        }
        if let Some(t) = &self.targets {
            for v in t.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(l) = &self.labels {
            for &v in l {
                h.update((v as u64).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_csv(path: &Path, has_labels: bool, n_targets: usize) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_csv(BufReader::new(file), has_labels, n_targets, &name, &path.display().to_string())
}

pub fn parse_csv<R: Read>(reader: R, has_labels: bool, n_targets: usize, name: &str, provenance: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let extra = n_targets + usize::from(has_labels);
    let mut width = None;
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { line: i + 1, reason: e.to_string() })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse { line, reason: format!("expected {w} fields, found {}", rec.len()) });
        }
        if w <= extra {
            return Err(Error::Parse { line, reason: format!("{w} fields leave no feature columns") });
        }
        let d = w - extra;
        for (j, cell) in rec.iter().enumerate() {
            if has_labels && j == w - 1 {
                let label: usize = cell
                    .parse()
                    .map_err(|_| Error::Parse { line, reason: format!("label {cell:?} is not a non-negative integer") })?;
                labels.push(label);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Parse { line, reason: format!("column {} value {cell:?} is not numeric", j + 1) })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, reason: format!("column {} value {cell:?} is not finite", j + 1) });
            }
            if j < d {
                feats.push(v);
            } else {
                targets.push(v);
            }
        }
        n += 1;
    }
    let Some(w) = width else {
        return Err(Error::Parse { line: 1, reason: "no data rows".into() });
    };
    let d = w - extra;
    let x = DenseMatrix::from_vec(n, d, feats)?;
    let targets = (n_targets > 0).then(|| DenseMatrix::from_vec(n, n_targets, targets)).transpose()?;
    Dataset::new(x, has_labels.then_some(labels), targets, name, provenance)
}

/// Writes the dataset in the layout [`load_csv`] reads. Values use Rust's
/// shortest round-trip formatting, so a reload is bit-identical.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_csv(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(ds: &Dataset, out: &mut W) -> Result<()> {
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(t) = &ds.targets {
            fields.extend(t.row(i).iter().map(|v| v.to_string()));
        }
        if let Some(l) = &ds.labels {
            fields.push(l[i].to_string());
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Per-column rescale to `[0, 1]`; constant columns become 0.
pub fn minmax_normalize(ds: &Dataset) -> Dataset {
    let (n, d) = ds.x.shape();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in ds.x.row_iter() {
        for j in 0..d {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let mut x = ds.x.clone();
    for i in 0..n {
        let row = x.row_mut(i);
        for j in 0..d {
            let span = hi[j] - lo[j];
            row[j] = if span > 0.0 { ((row[j] - lo[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    Dataset { x, ..ds.clone() }
}

/// Adversarial radius heuristic: one fifth of the mean row ℓ2-norm.
pub fn suggest_epsilon(ds: &Dataset) -> Result<f64> {
    let norms = ds.x.row_norms();
    let mean = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
    if !(mean > 0.0) {
        return Err(Error::invalid("all rows have zero norm; cannot derive epsilon"));
    }
    Ok(0.2 * mean)
}

/// Default distance of blob centres from the origin.
pub const BLOB_CENTRE_RADIUS: f64 = 2.0;

/// Isotropic Gaussian blobs (std `spread` per coordinate) around centres drawn
/// uniformly on the sphere of radius [`BLOB_CENTRE_RADIUS`]. Rows are grouped by class.
pub fn make_blobs(rng: &mut Rng, classes: usize, per_class: usize, dim: usize, spread: f64) -> Result<Dataset> {
    make_blobs_with_radius(rng, classes, per_class, dim, spread, BLOB_CENTRE_RADIUS)
}

pub fn make_blobs_with_radius(
    rng: &mut Rng,
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    radius: f64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::invalid("blob counts must be positive"));
    }
    if !(spread >= 0.0 && radius >= 0.0) {
        return Err(Error::invalid("spread and radius must be non-negative"));
    }
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let n = l2_norm(&v).max(f64::MIN_POSITIVE);
            v.iter().map(|x| radius * x / n).collect()
        })
        .collect();
    let mut values = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per_class {
            values.extend(centre.iter().map(|&mu| mu + spread * rng.normal()));
            labels.push(c);
        }
    }
    let x = DenseMatrix::from_vec(classes * per_class, dim, values)?;
    Dataset::new(
        x,
        Some(labels),
        None,
        "blobs",
        format!("blobs(classes={classes}, per_class={per_class}, dim={dim}, spread={spread}, radius={radius}, seed={})", rng.seed()),
    )
}

/// Two interleaved half circles in 2-d with Gaussian noise; the first
/// `⌈n/2⌉` rows are the outer moon (label 0).
pub fn make_two_moons(rng: &mut Rng, n: usize, noise: f64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("two moons needs at least two points"));
    }
    let n_outer = n.div_ceil(2);
    let n_inner = n - n_outer;
    let angle = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = angle(i, n_outer);
        values.extend([t.cos() + noise * rng.normal(), t.sin() + noise * rng.normal()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = angle(i, n_inner);
        values.extend([1.0 - t.cos() + noise * rng.normal(), 0.5 - t.sin() + noise * rng.normal()]);
        labels.push(1);
    }
    Dataset::new(
        DenseMatrix::from_vec(n, 2, values)?,
        Some(labels),
        None,
        "two_moons",
        format!("two_moons(n={n}, noise={noise}, seed={})", rng.seed()),
    )
}

const CACHE_MAGIC: [u8; 4] = *b"SLDS";
const CACHE_VERSION: u32 = 1;

/// Packed binary copy of a dataset: magic, version, then tensors laid out as
/// in checkpoints (`rows u32, cols u32, f64 LE values`). Labels are stored as
/// an `n × 1` tensor of integral values; absent parts have zero rows.
pub fn save_cache(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    let labels = ds
        .labels
        .as_ref()
        .map(|l| DenseMatrix::from_vec(l.len(), 1, l.iter().map(|&v| v as f64).collect()))
        .transpose()?
        .unwrap_or_else(|| DenseMatrix::zeros(0, 1));
    let targets = ds.targets.clone().unwrap_or_else(|| DenseMatrix::zeros(0, 1));
    for t in [&ds.x, &targets, &labels] {
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if word != CACHE_MAGIC {
        return Err(Error::invalid(format!("{} is not a dataset cache", path.display())));
    }
    r.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != CACHE_VERSION {
        return Err(Error::invalid("unsupported dataset cache version"));
    }
    let mut tensor = || -> Result<DenseMatrix> {
        let mut dims = [0u8; 8];
        r.read_exact(&mut dims)?;
        let rows = u32::from_le_bytes(dims[..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(dims[4..].try_into().unwrap()) as usize;
        let mut values = vec![0.0; rows * cols];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        DenseMatrix::from_vec(rows, cols, values)
    };
    let x = tensor()?;
    let targets = tensor()?;
    let labels = tensor()?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(
        x,
        (labels.rows() > 0).then(|| labels.as_slice().iter().map(|&v| v as usize).collect()),
        (targets.rows() > 0).then_some(targets),
        name,
        path.display().to_string(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str, labels: bool, targets: usize) -> Result<Dataset> {
        parse_csv(s.as_bytes(), labels, targets, "t", "inline")
    }

    #[test]
    fn parses_plain_matrix() {
        let ds = parse("1,2\n3,4\n5,6", false, 0).unwrap();
        assert_eq!(ds.x, DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        assert!(ds.labels.is_none() && ds.targets.is_none());
    }

    #[test]
    fn parses_targets_and_labels() {
        let ds = parse("1,2,0.5,1\n3,4,0.25,0\n", true, 1).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels, Some(vec![1, 0]));
        assert_eq!(ds.targets.unwrap().as_slice(), &[0.5, 0.25]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(parse("", false, 0), Err(Error::Parse { .. })));
        match parse("1,2\n3\n", false, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse("1,2\n3,x\n", false, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse("1,nan\n", false, 0).is_err());
        assert!(parse("1,2.5\n", true, 0).is_err());
        assert!(parse("1\n", true, 0).is_err());
    }

    #[test]
    fn minmax_cases() {
        let ds = parse("0,7\n5,7\n10,7", false, 0).unwrap();
        let n = minmax_normalize(&ds);
        assert_eq!(n.x.as_slice(), &[0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
        assert_eq!(minmax_normalize(&n), n);
    }

    #[test]
    fn epsilon_heuristic() {
        let unit = parse("1,0\n0,1\n0.6,0.8", false, 0).unwrap();
        assert!((suggest_epsilon(&unit).unwrap() - 0.2).abs() < 1e-15);
        let tens = parse("10,0\n0,-10\n6,8", false, 0).unwrap();
        assert!((suggest_epsilon(&tens).unwrap() - 2.0).abs() < 1e-15);
        // norms 5, 1, 0 → mean 2 → 0.4
        let mixed = parse("3,4\n1,0\n0,0", false, 0).unwrap();
        assert!((suggest_epsilon(&mixed).unwrap() - 0.4).abs() < 1e-15);
        assert!(suggest_epsilon(&parse("0,0\n0,0", false, 0).unwrap()).is_err());
    }

    #[test]
    fn blobs_shape_and_labels() {
        let ds = make_blobs(&mut Rng::new(1), 1, 10, 3, 0.5).unwrap();
        assert!(ds.labels.as_ref().unwrap().iter().all(|&l| l == 0));
        let ds = make_blobs(&mut Rng::new(1), 4, 25, 8, 0.5).unwrap();
        let labels = ds.labels.unwrap();
        for c in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 25);
        }
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let ds = make_blobs(&mut Rng::new(3), 3, 10, 5, 0.0).unwrap();
        for i in 0..30 {
            assert_eq!(ds.x.row(i), ds.x.row(i / 10 * 10));
        }
        for c in 0..3 {
            assert!((l2_norm(ds.x.row(c * 10)) - BLOB_CENTRE_RADIUS).abs() < 1e-12);
        }
    }

    // Frozen from a generator run with seed 0.
    const BLOBS_4_500_32_CHECKSUM: &str = "1bc3f6adab38488cca2221d39c424dcda8b627f102b354d5504910745711702d";

    #[test]
    fn blobs_checksum_is_frozen() {
        let a = make_blobs(&mut Rng::new(0), 4, 500, 32, 0.5).unwrap();
        let b = make_blobs(&mut Rng::new(0), 4, 500, 32, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), BLOBS_4_500_32_CHECKSUM);
    }

    #[test]
    fn moons_are_balanced() {
        let ds = make_two_moons(&mut Rng::new(2), 101, 0.05).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 51);
        assert_eq!(ds.dim(), 2);
        let clean = make_two_moons(&mut Rng::new(2), 4, 0.0).unwrap();
        assert!((clean.x.get(0, 0) - 1.0).abs() < 1e-15 && clean.x.get(0, 1).abs() < 1e-15);
        assert!((clean.x.get(2, 0) - 0.0).abs() < 1e-15 && (clean.x.get(2, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = parse("1.5,2,0.25,3\n-3,4e-3,1,0\n", true, 1).unwrap();
        let p = dir.path().join("d.bin");
        save_cache(&ds, &p).unwrap();
        let back = load_cache(&p).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.targets, ds.targets);
    }
}
