//! Training loop for the swapped objective
//! `L = KL(Q₂ ‖ P₁) + KL(Q₁ ‖ P₂)`, where `P₁, P₂` are predictions on two
//! perturbed views of the batch and `Q₁, Q₂` the Sinkhorn targets solved from
//! each view's logits.
//!
//! Targets, perturbations and the clean anchor are constants of the step:
//! gradients flow only through the two perturbed forward passes.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_and_solve, AdaptConfig, AdaptState, WarmupShape};
use crate::data::{suggest_epsilon, Dataset};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{adam_step, save_checkpoint, AdamState, Architecture, BnPlacement, Model, ParamGradients};
use crate::prob::{kl_divergence, kl_logit_grad, DistributionBatch};
use crate::rng::Rng;
use crate::sinkhorn;
use crate::vat::{perturbed_view, random_view, vat_forward, VatConfig, View};

/// How the two views of a batch are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationMode {
    /// Both views are the clean pass.
    #[serde(rename = "NP")]
    Np,
    /// Both views use ξ-scaled random perturbations.
    #[serde(rename = "RP")]
    Rp,
    /// Random first view, adversarial second view.
    #[serde(rename = "RP+VAT")]
    RpVat,
    #[default]
    #[serde(rename = "VAT")]
    Vat,
}

impl fmt::Display for PerturbationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Np => "NP",
            Self::Rp => "RP",
            Self::RpVat => "RP+VAT",
            Self::Vat => "VAT",
        })
    }
}

impl FromStr for PerturbationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NP" => Ok(Self::Np),
            "RP" => Ok(Self::Rp),
            "RP+VAT" | "RPVAT" | "RP-VAT" => Ok(Self::RpVat),
            "VAT" => Ok(Self::Vat),
            other => Err(Error::invalid(format!("unknown perturbation mode {other:?}; expected NP, RP, RP+VAT or VAT"))),
        }
    }
}

/// Flat run configuration; every field has a default so partial TOML files work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub output_dim: usize,
    pub embedding_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub bn: BnPlacement,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate from `lr_drop_epoch` on.
    pub lr_late: f64,
    /// Defaults to `epochs / 5` below 1000 epochs, else 1000.
    pub lr_drop_epoch: Option<usize>,
    pub seed: u64,
    pub mode: PerturbationMode,
    pub xi: f64,
    /// Defaults to one fifth of the mean input row norm.
    pub epsilon: Option<f64>,
    pub sinkhorn_iters: usize,
    /// Defaults to `log √k`.
    pub h_target: Option<f64>,
    pub h_tol: f64,
    pub h_step: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub max_inner_iters: usize,
    /// Warm-up length in epochs; converted to `warmup_epochs · n / m` steps.
    pub warmup_epochs: usize,
    pub warmup_shape: WarmupShape,
    /// Defaults to `max(1, epochs / 10)`.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adapt = AdaptConfig::for_outputs(100, 0);
        Self {
            batch_size: 256,
            output_dim: 100,
            embedding_dim: 10,
            encoder_hidden: vec![1024, 1024],
            classifier_hidden: vec![128, 128],
            bn: BnPlacement::Both,
            epochs: 5000,
            lr: 5e-4,
            lr_late: 1e-4,
            lr_drop_epoch: None,
            seed: 0,
            mode: PerturbationMode::Vat,
            xi: VatConfig::default().xi,
            epsilon: None,
            sinkhorn_iters: sinkhorn::DEFAULT_ITERS,
            h_target: None,
            h_tol: adapt.h_tol,
            h_step: adapt.h_step,
            lambda_min: adapt.lambda_min,
            lambda_max: adapt.lambda_max,
            max_inner_iters: adapt.max_inner_iters,
            warmup_epochs: 100,
            warmup_shape: WarmupShape::Cosine,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, so a bad config is reported in one pass.
    /// `n` is the dataset size when known.
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if let Some(n) = n {
            if self.batch_size > n {
                errs.push(format!("batch_size {} exceeds dataset size {n}", self.batch_size));
            }
        }
        if self.output_dim < 2 {
            errs.push(format!("output_dim must be at least 2, got {}", self.output_dim));
        }
        if self.embedding_dim == 0 {
            errs.push("embedding_dim must be at least 1".to_string());
        }
        if self.encoder_hidden.contains(&0) || self.classifier_hidden.contains(&0) {
            errs.push("hidden widths must be positive".to_string());
        }
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".to_string());
        }
        for (name, v) in [("lr", self.lr), ("lr_late", self.lr_late), ("xi", self.xi)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if let Some(e) = self.epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                errs.push(format!("epsilon must be finite and non-negative, got {e}"));
            }
        }
        if self.sinkhorn_iters == 0 {
            errs.push("sinkhorn_iters must be at least 1".to_string());
        }
        if self.checkpoint_every == Some(0) {
            errs.push("checkpoint_every must be at least 1".to_string());
        }
        if self.output_dim >= 2 {
            if let Err(Error::Config(more)) = self.adapt_config(0).validate() {
                errs.extend(more);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            embedding_dim: self.embedding_dim,
            classifier_hidden: self.classifier_hidden.clone(),
            output_dim: self.output_dim,
            bn: self.bn,
        }
    }

    pub fn adapt_config(&self, warmup_steps: usize) -> AdaptConfig {
        let base = AdaptConfig::for_outputs(self.output_dim, warmup_steps);
        AdaptConfig {
            h_target: self.h_target.unwrap_or(base.h_target),
            h_tol: self.h_tol,
            h_step: self.h_step,
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            max_inner_iters: self.max_inner_iters,
            shape: self.warmup_shape,
            ..base
        }
    }

    pub fn warmup_steps(&self, n: usize) -> usize {
        self.warmup_epochs * n / self.batch_size.max(1)
    }

    pub fn lr_drop(&self) -> usize {
        self.lr_drop_epoch.unwrap_or(if self.epochs < 1000 { self.epochs / 5 } else { 1000 })
    }

    /// Learning rate used throughout (0-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop() {
            self.lr
        } else {
            self.lr_late
        }
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or((self.epochs / 10).max(1))
    }

    pub fn resolve_epsilon(&self, ds: &Dataset) -> Result<f64> {
        match self.epsilon {
            Some(e) => Ok(e),
            None => suggest_epsilon(ds),
        }
    }
}

/// Everything a step mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub adapt: AdaptState,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(&model);
        Self { model, adam, adapt: AdaptState::default() }
    }
}

/// Per-step settings that do not change within a run.
#[derive(Clone, Debug)]
pub struct StepSettings {
    pub mode: PerturbationMode,
    pub vat: VatConfig,
    pub adapt: AdaptConfig,
    pub sinkhorn_iters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// `λ` after both adaptation calls.
    pub lambda: f64,
    /// `H(Q₁)` and `H(Q₂)`.
    pub h_q: [f64; 2],
    pub h_target: f64,
    /// Column means of `(Q₁ + Q₂) / 2`.
    pub q_col_means: Vec<f64>,
    pub degenerate_rows: usize,
}

/// The swapped objective for fixed targets; also returns `∂L/∂O` for each view.
pub fn swapped_loss(
    p1: &DistributionBatch,
    q1: &DistributionBatch,
    p2: &DistributionBatch,
    q2: &DistributionBatch,
) -> Result<(f64, [DenseMatrix; 2])> {
    let loss = kl_divergence(q2, p1)? + kl_divergence(q1, p2)?;
    Ok((loss, [kl_logit_grad(q2, p1)?, kl_logit_grad(q1, p2)?]))
}

/// Loss and parameter gradients for two views with detached targets.
pub fn loss_and_grads(
    model: &Model,
    views: [&View; 2],
    targets: [&DistributionBatch; 2],
) -> Result<(f64, ParamGradients)> {
    let (loss, [g1, g2]) = swapped_loss(&views[0].probs, targets[0], &views[1].probs, targets[1])?;
    let mut grads = model.backward_params(&views[0].tape, &g1)?;
    grads.accumulate(&model.backward_params(&views[1].tape, &g2)?)?;
    Ok((loss, grads))
}

fn make_views(
    model: &Model,
    batch: &DenseMatrix,
    anchor: &DistributionBatch,
    clean: &View,
    s: &StepSettings,
    rng: &mut Rng,
) -> Result<([View; 2], usize)> {
    let adversarial = |rng: &mut Rng| vat_forward(model, batch, anchor, &s.vat, rng).map(|o| (o.view, o.degenerate_rows));
    Ok(match s.mode {
        PerturbationMode::Np => ([clean.clone(), clean.clone()], 0),
        PerturbationMode::Rp => {
            let a = random_view(model, batch, s.vat.xi, rng)?;
            let b = random_view(model, batch, s.vat.xi, rng)?;
            ([a, b], 0)
        }
        PerturbationMode::RpVat => {
            let a = random_view(model, batch, s.vat.xi, rng)?;
            let (b, deg) = adversarial(rng)?;
            ([a, b], deg)
        }
        PerturbationMode::Vat => {
            let (a, da) = adversarial(rng)?;
            let (b, db) = adversarial(rng)?;
            ([a, b], da + db)
        }
    })
}

/// One optimisation step on `batch` at learning rate `lr`. Numerical
/// failures anywhere in the step surface as [`Error::Divergence`].
pub fn train_step(state: &mut TrainState, batch: &DenseMatrix, s: &StepSettings, rng: &mut Rng, lr: f64) -> Result<StepStats> {
    if batch.cols() != state.model.input_dim() {
        return Err(Error::invalid(format!(
            "batch has {} columns, model expects input dimension {}",
            batch.cols(),
            state.model.input_dim()
        )));
    }
    batch.ensure_finite("training batch")?;
    let step = state.adapt.step;
    step_inner(state, batch, s, rng, lr).map_err(|e| match e {
        Error::InvalidInput(reason) | Error::NumericFailure(reason) | Error::Divergence { reason, .. } => {
            Error::Divergence { step, reason }
        }
        other => other,
    })
}

fn step_inner(state: &mut TrainState, batch: &DenseMatrix, s: &StepSettings, rng: &mut Rng, lr: f64) -> Result<StepStats> {
    let clean = perturbed_view(&state.model, batch, DenseMatrix::zeros(batch.rows(), batch.cols()))?;
    let anchor = clean.probs.clone();
    let (views, degenerate_rows) = make_views(&state.model, batch, &anchor, &clean, s, rng)?;

    let first = adapt_and_solve(&views[0].logits, &mut state.adapt, &s.adapt, s.sinkhorn_iters)?;
    let second = adapt_and_solve(&views[1].logits, &mut state.adapt, &s.adapt, s.sinkhorn_iters)?;
    let (loss, grads) = loss_and_grads(&state.model, [&views[0], &views[1]], [&first.q, &second.q])?;
    if !loss.is_finite() {
        return Err(Error::NumericFailure(format!(
            "loss {loss} (lambda {}, H(Q) {} / {})",
            state.adapt.lambda, first.h_q, second.h_q
        )));
    }
    adam_step(&mut state.model, &grads, &mut state.adam, lr)?;
    state.model.absorb_batch_stats(&clean.tape)?;
    if !state.model.is_finite() {
        return Err(Error::NumericFailure("parameters became non-finite after the update".into()));
    }
    state.adapt.step += 1;

    let k = first.q.cols();
    let (c1, c2) = (first.q.col_means(), second.q.col_means());
    let q_col_means = (0..k).map(|j| 0.5 * (c1[j] + c2[j])).collect();
    Ok(StepStats {
        loss,
        lambda: state.adapt.lambda,
        h_q: [first.h_q, second.h_q],
        h_target: first.h_target,
        q_col_means,
        degenerate_rows,
    })
}

/// One telemetry line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lambda: f64,
    /// Mean of `H(Q₁)` and `H(Q₂)`.
    pub h_q: f64,
    pub lr: f64,
    pub h_target: f64,
    pub degenerate_rows: usize,
}

pub trait TelemetrySink {
    fn record(&mut self, rec: &StepRecord) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl TelemetrySink for NullSink {
    fn record(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

/// Newline-delimited JSON, one object per step.
pub struct NdjsonSink<W: Write> {
    out: W,
}

impl<W: Write> NdjsonSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TelemetrySink for NdjsonSink<W> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl TelemetrySink for Vec<StepRecord> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Run summary. Equality ignores `wall_clock_secs`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub step_loss: Vec<f64>,
    pub lambda_trace: Vec<f64>,
    pub h_q_trace: Vec<f64>,
    pub h_target_trace: Vec<f64>,
    /// Per-step column means of the targets.
    pub q_col_means: Vec<Vec<f64>>,
    pub steps: usize,
    pub warmup_steps: usize,
    pub epsilon: f64,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl PartialEq for TrainReport {
    fn eq(&self, o: &Self) -> bool {
        self.epoch_loss == o.epoch_loss
            && self.step_loss == o.step_loss
            && self.lambda_trace == o.lambda_trace
            && self.h_q_trace == o.h_q_trace
            && self.h_target_trace == o.h_target_trace
            && self.q_col_means == o.q_col_means
            && self.steps == o.steps
            && self.warmup_steps == o.warmup_steps
            && self.epsilon == o.epsilon
            && self.checkpoints == o.checkpoints
            && self.final_checkpoint == o.final_checkpoint
    }
}

pub struct FitOutcome {
    pub model: Model,
    pub report: TrainReport,
}

/// Seeded initial weights; depends only on the root seed and the architecture,
/// so runs that differ only in mode start from the same model.
pub fn init_model(cfg: &TrainConfig, input_dim: usize) -> Result<Model> {
    Model::from_architecture(&cfg.architecture(input_dim), &mut Rng::new(cfg.seed).split("init"))
}

/// Trains for `cfg.epochs` epochs of `⌊n / m⌋` shuffled batches each.
/// Checkpoints go to `checkpoint_dir` when given.
pub fn fit(ds: &Dataset, cfg: &TrainConfig, sink: &mut dyn TelemetrySink, checkpoint_dir: Option<&Path>) -> Result<FitOutcome> {
    let n = ds.len();
    cfg.validate(Some(n))?;
    let started = Instant::now();
    let epsilon = cfg.resolve_epsilon(ds)?;
    let warmup_steps = cfg.warmup_steps(n);
    let settings = StepSettings {
        mode: cfg.mode,
        vat: VatConfig { xi: cfg.xi, epsilon },
        adapt: cfg.adapt_config(warmup_steps),
        sinkhorn_iters: cfg.sinkhorn_iters,
    };
    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.split("train");
    let mut vat_rng = root.split("vat");
    let mut state = TrainState::new(init_model(cfg, ds.dim())?);
    let m = cfg.batch_size;
    let per_epoch = n / m;
    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        step_loss: Vec::new(),
        lambda_trace: Vec::new(),
        h_q_trace: Vec::new(),
        h_target_trace: Vec::new(),
        q_col_means: Vec::new(),
        steps: 0,
        warmup_steps,
        epsilon,
        checkpoints: Vec::new(),
        final_checkpoint: None,
        wall_clock_secs: 0.0,
    };
    let interval = cfg.checkpoint_interval();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for b in 0..per_epoch {
            let batch = ds.x.select_rows(&order[b * m..(b + 1) * m]);
            let stats = train_step(&mut state, &batch, &settings, &mut vat_rng, lr)?;
            let h_q = 0.5 * (stats.h_q[0] + stats.h_q[1]);
            sink.record(&StepRecord {
                step: report.steps,
                epoch,
                loss: stats.loss,
                lambda: stats.lambda,
                h_q,
                lr,
                h_target: stats.h_target,
                degenerate_rows: stats.degenerate_rows,
            })?;
            total += stats.loss;
            report.steps += 1;
            report.step_loss.push(stats.loss);
            report.lambda_trace.push(stats.lambda);
            report.h_q_trace.push(h_q);
            report.h_target_trace.push(stats.h_target);
            report.q_col_means.push(stats.q_col_means);
        }
        report.epoch_loss.push(total / per_epoch as f64);
        if let Some(dir) = checkpoint_dir {
            if (epoch + 1) % interval == 0 || epoch + 1 == cfg.epochs {
                let path = dir.join(format!("epoch_{:05}.ckpt", epoch + 1));
                save_checkpoint(&state.model, &path)?;
                report.checkpoints.push(path);
            }
        }
    }
    sink.flush()?;
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.ckpt");
        save_checkpoint(&state.model, &path)?;
        report.final_checkpoint = Some(path);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(FitOutcome { model: state.model, report })
}

/// Eval-mode embedding of every row, in batches of `chunk` rows.
pub fn embed_dataset(model: &Model, x: &DenseMatrix, chunk: usize) -> Result<DenseMatrix> {
    let n = x.rows();
    let mut out = Vec::with_capacity(n * model.embedding_dim());
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk.max(1)) {
        out.extend_from_slice(model.embed(&x.select_rows(part))?.as_slice());
    }
    DenseMatrix::from_vec(n, model.embedding_dim(), out)
}

/// Largest deviation factor of a column mean from `1/k` over sliding windows
/// of `window` steps starting at `from`: returns `(min·k, max·k)` of the
/// window-averaged column means.
pub fn column_balance(q_col_means: &[Vec<f64>], from: usize, window: usize) -> Option<(f64, f64)> {
    let steps = q_col_means.len();
    if window == 0 || from + window > steps {
        return None;
    }
    let k = q_col_means[0].len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for start in from..=steps - window {
        for j in 0..k {
            let mean = q_col_means[start..start + window].iter().map(|c| c[j]).sum::<f64>() / window as f64;
            lo = lo.min(mean * k as f64);
            hi = hi.max(mean * k as f64);
        }
    }
    Some((lo, hi))
}
