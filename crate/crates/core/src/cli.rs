//! `selflabel` command-line driver: `train`, `eval`, `sinkhorn-demo`, `gen-data`.
//!
//! A run is configured by a flat TOML file whose keys are the [`TrainConfig`]
//! fields plus the run-level keys in [`RunSettings`]; every key can be
//! overridden by a `--key value` flag. All randomness derives from `seed`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, hex, load_csv, make_blobs_with_radius, make_two_moons, minmax_normalize, save_csv, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, Metric, MetricsReport, ProbeConfig};
use crate::matrix::DenseMatrix;
use crate::nn::{load_checkpoint, BnPlacement};
use crate::prob::{entropy, softmax_rows};
use crate::rng::{sample_gaussian, Rng};
use crate::sinkhorn;
use crate::trainer::{embed_dataset, fit, NdjsonSink, PerturbationMode, TrainConfig};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "selflabel", version, about = "Augmentation-free self-labelling with VAT views and Sinkhorn targets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write manifest, telemetry, checkpoints, embedding and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a precomputed embedding) on a labelled dataset.
    Eval(EvalArgs),
    /// Emit the P / Q-per-λ rows and the H(Q) table for random logits.
    SinkhornDemo(DemoArgs),
    /// Write a synthetic dataset as CSV.
    GenData(GenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flag mirrors of the config keys; a flag wins over the file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub has_labels: Option<bool>,
    #[arg(long)]
    pub n_targets: Option<usize>,
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub eval: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub probe_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub output_dim: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub encoder_hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub classifier_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub bn: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_late: Option<f64>,
    #[arg(long)]
    pub lr_drop_epoch: Option<usize>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    #[arg(long)]
    pub h_target: Option<f64>,
    #[arg(long)]
    pub h_tol: Option<f64>,
    #[arg(long)]
    pub h_step: Option<f64>,
    #[arg(long)]
    pub lambda_min: Option<f64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub max_inner_iters: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

/// Run-level keys that sit beside the training keys in the TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub has_labels: bool,
    pub n_targets: usize,
    pub normalize: bool,
    /// Evaluate the final embedding after training.
    pub eval: bool,
    pub metrics: Vec<String>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        Self {
            data: None,
            out_dir: PathBuf::from("runs/latest"),
            has_labels: true,
            n_targets: 0,
            normalize: false,
            eval: true,
            metrics: [Metric::Linear, Metric::Knn, Metric::Kmeans].iter().map(ToString::to_string).collect(),
            probe_epochs: probe.epochs,
            probe_lr: probe.lr,
        }
    }
}

const RUN_KEYS: [&str; 9] =
    ["data", "out_dir", "has_labels", "n_targets", "normalize", "eval", "metrics", "probe_epochs", "probe_lr"];

/// Fully resolved configuration of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSettings,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses a flat TOML document; keys are split between run and training settings.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let (run, train): (toml::Table, toml::Table) =
            table.into_iter().partition(|(k, _)| RUN_KEYS.contains(&k.as_str()));
        let mut errs = Vec::new();
        let run = RunSettings::deserialize(run).map_err(|e| errs.push(e.to_string())).ok();
        let train = TrainConfig::deserialize(train).map_err(|e| errs.push(e.to_string())).ok();
        match (run, train) {
            (Some(run), Some(train)) if errs.is_empty() => Ok(Self { run, train }),
            _ => Err(Error::Config(errs)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    /// Applies flag overrides, collecting every malformed value.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        let mut errs = Vec::new();
        let r = &mut self.run;
        let t = &mut self.train;
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => { $( if let Some(v) = &o.$src { $dst = v.clone(); } )* };
        }
        set!(
            out_dir => r.out_dir, has_labels => r.has_labels, n_targets => r.n_targets, normalize => r.normalize,
            eval => r.eval, metrics => r.metrics, probe_epochs => r.probe_epochs, probe_lr => r.probe_lr,
            seed => t.seed, epochs => t.epochs, batch_size => t.batch_size, output_dim => t.output_dim,
            embedding_dim => t.embedding_dim, encoder_hidden => t.encoder_hidden,
            classifier_hidden => t.classifier_hidden, lr => t.lr, lr_late => t.lr_late, xi => t.xi,
            sinkhorn_iters => t.sinkhorn_iters, h_tol => t.h_tol, h_step => t.h_step,
            lambda_min => t.lambda_min, lambda_max => t.lambda_max, max_inner_iters => t.max_inner_iters,
            warmup_epochs => t.warmup_epochs,
        );
        if o.data.is_some() {
            r.data = o.data.clone();
        }
        if o.lr_drop_epoch.is_some() {
            t.lr_drop_epoch = o.lr_drop_epoch;
        }
        if o.epsilon.is_some() {
            t.epsilon = o.epsilon;
        }
        if o.h_target.is_some() {
            t.h_target = o.h_target;
        }
        if o.checkpoint_every.is_some() {
            t.checkpoint_every = o.checkpoint_every;
        }
        if let Some(m) = &o.mode {
            match m.parse::<PerturbationMode>() {
                Ok(m) => t.mode = m,
                Err(e) => errs.push(e.to_string()),
            }
        }
        if let Some(b) = &o.bn {
            match b.parse::<BnPlacement>() {
                Ok(b) => t.bn = b,
                Err(e) => errs.push(e.to_string()),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Every problem with the resolved config; `n` is the dataset size when known.
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        let mut errs = Vec::new();
        if self.run.data.is_none() {
            errs.push("no input data: set `data` in the config or pass --data".to_string());
        }
        for m in &self.run.metrics {
            if let Err(e) = m.parse::<Metric>() {
                errs.push(e.to_string());
            }
        }
        if !(self.run.probe_lr >= 0.0) {
            errs.push(format!("probe_lr must be non-negative, got {}", self.run.probe_lr));
        }
        if let Err(Error::Config(more)) = self.train.validate(n) {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            metrics: self.run.metrics.iter().filter_map(|m| m.parse().ok()).collect(),
            probe: ProbeConfig { epochs: self.run.probe_epochs, lr: self.run.probe_lr, ..ProbeConfig::default() },
            seed: self.train.seed,
            ..EvalConfig::default()
        }
    }

    /// Hash of the resolved training configuration; output paths are excluded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.train).expect("config serialises");
        hex(&Sha256::digest(&json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub rows: usize,
    pub cols: usize,
}

/// Everything needed to reproduce a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Resolved `epsilon` and warm-up length, which depend on the data.
    pub epsilon: f64,
    pub warmup_steps: usize,
    pub config: RunConfig,
    pub config_fingerprint: String,
    pub inputs: Vec<InputRecord>,
    pub outputs: BTreeMap<String, PathBuf>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes one row per sample, no header, shortest round-trip float formatting.
pub fn write_matrix_csv(m: &DenseMatrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn load_dataset(path: &Path, has_labels: bool, n_targets: usize, normalize: bool) -> Result<Dataset> {
    let ds = load_csv(path, has_labels, n_targets)?;
    Ok(if normalize { minmax_normalize(&ds) } else { ds })
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(&args.overrides)?;
    cfg.validate(None)?;
    let data_path = cfg.run.data.clone().expect("validated");
    let ds = load_dataset(&data_path, cfg.run.has_labels, cfg.run.n_targets, cfg.run.normalize)?;
    cfg.validate(Some(ds.len()))?;
    if cfg.run.eval {
        // surface missing labels/targets before spending time on training
        let ev = cfg.eval_config();
        let mut errs = Vec::new();
        if ev.metrics.iter().any(|m| *m != Metric::Rss) && ds.labels.is_none() {
            errs.push("evaluation metrics other than rss need a labelled dataset".to_string());
        }
        if ev.metrics.contains(&Metric::Rss) && ds.targets.is_none() {
            errs.push("rss needs regression targets (n_targets > 0)".to_string());
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
    }

    let out = cfg.run.out_dir.clone();
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let telemetry_path = out.join("telemetry.ndjson");
    let mut sink = NdjsonSink::new(BufWriter::new(fs::File::create(&telemetry_path)?));
    let outcome = fit(&ds, &cfg.train, &mut sink, Some(&ckpt_dir))?;
    drop(sink);

    let mut outputs = BTreeMap::new();
    outputs.insert("telemetry".to_string(), telemetry_path);
    for p in &outcome.report.checkpoints {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        outputs.insert(format!("checkpoint_{name}"), p.clone());
    }
    if let Some(p) = &outcome.report.final_checkpoint {
        outputs.insert("checkpoint_final".to_string(), p.clone());
    }
    let z = embed_dataset(&outcome.model, &ds.x, 1024)?;
    let emb_path = out.join("embedding.csv");
    write_matrix_csv(&z, &emb_path)?;
    outputs.insert("embedding".to_string(), emb_path);
    let summary_path = out.join("train_summary.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "steps": outcome.report.steps,
            "epoch_loss": outcome.report.epoch_loss,
            "final_lambda": outcome.report.lambda_trace.last(),
            "final_h_q": outcome.report.h_q_trace.last(),
            "wall_clock_secs": outcome.report.wall_clock_secs,
        }),
    )?;
    outputs.insert("summary".to_string(), summary_path);
    if cfg.run.eval {
        let mut report = evaluate(&z, ds.labels.as_deref(), ds.targets.as_ref(), &cfg.eval_config())?;
        report.config_fingerprint = cfg.fingerprint();
        let (json, csv) = report.save(&out, "metrics")?;
        outputs.insert("metrics_json".to_string(), json);
        outputs.insert("metrics_csv".to_string(), csv);
    }
    let manifest_path = out.join("manifest.json");
    outputs.insert("manifest".to_string(), manifest_path.clone());
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: "train".to_string(),
        seed: cfg.train.seed,
        epsilon: outcome.report.epsilon,
        warmup_steps: outcome.report.warmup_steps,
        config_fingerprint: cfg.fingerprint(),
        inputs: vec![InputRecord { sha256: file_sha256(&data_path)?, path: data_path, rows: ds.len(), cols: ds.dim() }],
        config: cfg,
        outputs,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint; its eval-mode embedding of `--data` is scored.
    #[arg(long, conflicts_with = "embedding", required_unless_present = "embedding")]
    pub checkpoint: Option<PathBuf>,
    /// Precomputed embedding CSV (e.g. an external 2-d projection), scored instead of a checkpoint.
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    /// Dataset CSV supplying features (for `--checkpoint`) and labels/targets.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub has_labels: bool,
    #[arg(long, default_value_t = 0)]
    pub n_targets: usize,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub normalize: bool,
    /// Comma-separated subset of linear, knn, kmeans, rss.
    #[arg(long, value_delimiter = ',', default_value = "linear,knn,kmeans")]
    pub metrics: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub probe_lr: f64,
    /// Directory for `metrics.json` and `metrics.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let mut errs = Vec::new();
    let metrics: Vec<Metric> = args
        .metrics
        .iter()
        .filter_map(|m| m.parse().map_err(|e: Error| errs.push(e.to_string())).ok())
        .collect();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let ds = load_dataset(&args.data, args.has_labels, args.n_targets, args.normalize)?;
    let z = match (&args.checkpoint, &args.embedding) {
        (Some(ckpt), _) => {
            let model = load_checkpoint(ckpt)?;
            if model.input_dim() != ds.dim() {
                return Err(Error::invalid(format!(
                    "dataset {} has {} feature columns but the checkpoint expects d = {}",
                    args.data.display(),
                    ds.dim(),
                    model.input_dim()
                )));
            }
            embed_dataset(&model, &ds.x, 1024)?
        }
        (None, Some(emb)) => {
            let z = load_csv(emb, false, 0)?.x;
            if z.rows() != ds.len() {
                return Err(Error::invalid(format!("embedding has {} rows, dataset has {}", z.rows(), ds.len())));
            }
            z
        }
        (None, None) => return Err(Error::invalid("pass --checkpoint or --embedding")),
    };
    let cfg = EvalConfig {
        metrics: metrics.into_iter().collect(),
        probe: ProbeConfig { epochs: args.probe_epochs, lr: args.probe_lr, ..ProbeConfig::default() },
        seed: args.seed,
        ..EvalConfig::default()
    };
    let report = evaluate(&z, ds.labels.as_deref(), ds.targets.as_ref(), &cfg)?;
    fs::create_dir_all(&args.out_dir)?;
    report.save(&args.out_dir, "metrics")?;
    Ok(report)
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,1.5,2")]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = sinkhorn::DEFAULT_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale applied to the standard-normal logits.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Directory for `plans.csv` and `entropy.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoOutput {
    pub plans_csv: String,
    pub entropy_csv: String,
    pub entropies: Vec<(f64, f64)>,
}

/// Builds the demo tables for given logits: one line per row with `P` then
/// `Q` at each `λ` (`(1 + |Λ|)·k` values), and `λ, H(P), H(Q)` per `λ`.
pub fn sinkhorn_demo(logits: &DenseMatrix, lambdas: &[f64], iters: usize) -> Result<DemoOutput> {
    let mut errs = Vec::new();
    if lambdas.is_empty() {
        errs.push("need at least one lambda".to_string());
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        errs.push(format!("lambdas must be positive, got {l}"));
    }
    if iters == 0 {
        errs.push("iters must be at least 1".to_string());
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let (m, k) = logits.shape();
    let p = softmax_rows(logits, 1.0)?;
    let plans: Vec<_> = lambdas.iter().map(|&l| sinkhorn::solve_with_entropy(logits, l, iters)).collect::<Result<_>>()?;
    let mut header = vec!["row".to_string()];
    header.extend((0..k).map(|j| format!("p_{j}")));
    for l in lambdas {
        header.extend((0..k).map(|j| format!("q_lambda{l}_{j}")));
    }
    let mut plans_csv = header.join(",") + "\n";
    for i in 0..m {
        let mut fields = vec![i.to_string()];
        fields.extend(p.row(i).iter().map(|v| v.to_string()));
        for (q, _) in &plans {
            fields.extend(q.row(i).iter().map(|v| v.to_string()));
        }
        plans_csv += &(fields.join(",") + "\n");
    }
    let h_p = entropy(&p);
    let mut entropy_csv = "lambda,h_p,h_q\n".to_string();
    let mut entropies = Vec::new();
    for (l, (_, h)) in lambdas.iter().zip(&plans) {
        entropy_csv += &format!("{l},{h_p},{h}\n");
        entropies.push((*l, *h));
    }
    Ok(DemoOutput { plans_csv, entropy_csv, entropies })
}

pub fn cmd_sinkhorn_demo(args: &DemoArgs) -> Result<DemoOutput> {
    if args.m == 0 || args.k == 0 {
        return Err(Error::Config(vec![format!("m and k must be positive, got m={}, k={}", args.m, args.k)]));
    }
    let logits = sample_gaussian(&mut Rng::new(args.seed).split("demo"), args.m, args.k)?.scale(args.scale);
    let out = sinkhorn_demo(&logits, &args.lambdas, args.iters)?;
    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("plans.csv"), &out.plans_csv)?;
    fs::write(args.out_dir.join("entropy.csv"), &out.entropy_csv)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DataKind {
    Blobs,
    Moons,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    pub kind: DataKind,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
    #[arg(long, default_value_t = data::BLOB_CENTRE_RADIUS)]
    pub radius: f64,
    /// Point count for `moons`.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV (features then label).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_gen_data(args: &GenArgs) -> Result<Dataset> {
    let mut rng = Rng::new(args.seed);
    let ds = match args.kind {
        DataKind::Blobs => make_blobs_with_radius(&mut rng, args.classes, args.per_class, args.dim, args.spread, args.radius)?,
        DataKind::Moons => make_two_moons(&mut rng, args.n, args.noise)?,
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_csv(&ds, &args.out)?;
    Ok(ds)
}

/// Caps the rayon pool at `SELFLABEL_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SELFLABEL_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(vec![format!("SELFLABEL_THREADS must be a positive integer, got {v:?}")]))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidState(e.to_string()))?;
    }
    Ok(())
}

/// Runs a parsed command; the caller maps the result to an exit code.
pub fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Train(a) => {
            let m = cmd_train(a)?;
            eprintln!("train: outputs written to {}", m.config.run.out_dir.display());
        }
        Command::Eval(a) => {
            let r = cmd_eval(a)?;
            let mut line = Vec::new();
            r.write_csv(&mut line)?;
            print!("{}", String::from_utf8_lossy(&line));
        }
        Command::SinkhornDemo(a) => {
            let out = cmd_sinkhorn_demo(a)?;
            print!("{}", out.entropy_csv);
        }
        Command::GenData(a) => {
            let ds = cmd_gen_data(a)?;
            eprintln!("gen-data: {} rows x {} columns -> {}", ds.len(), ds.dim(), a.out.display());
        }
    }
    Ok(())
}
