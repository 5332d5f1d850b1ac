//! Fixed-topology MLP: encoder `f` and classifier `g` with optional batch
//! normalisation, reverse-mode gradients for both parameters and inputs.
//!
//! Layer order inside a [`Model`] is encoder layers followed by classifier
//! layers. A layer computes `act(bn(x·W + b))`; BN, when present, sits between
//! the affine map and the activation.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, batch_norm: bool) -> Self {
        Self { in_dim, out_dim, activation, batch_norm }
    }
}

/// Where batch-norm layers go (the `No-BN / EN-BN / CL-BN / EN-CL BN` ablation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnPlacement {
    None,
    Encoder,
    Classifier,
    #[default]
    Both,
}

impl BnPlacement {
    fn encoder(self) -> bool {
        matches!(self, BnPlacement::Encoder | BnPlacement::Both)
    }

    fn classifier(self) -> bool {
        matches!(self, BnPlacement::Classifier | BnPlacement::Both)
    }
}

impl std::str::FromStr for BnPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "no-bn" => Ok(Self::None),
            "encoder" | "en-bn" => Ok(Self::Encoder),
            "classifier" | "cl-bn" => Ok(Self::Classifier),
            "both" | "en-cl" | "en-cl-bn" => Ok(Self::Both),
            other => Err(Error::invalid(format!("unknown BN placement {other:?}"))),
        }
    }
}

/// Widths of the encoder/classifier stacks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub output_dim: usize,
    pub bn: BnPlacement,
}

impl Architecture {
    /// `d → 1024 → 1024 → l` encoder and `l → 128 → 128 → k` classifier, BN in both.
    pub fn standard(input_dim: usize, embedding_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: vec![1024, 1024],
            embedding_dim,
            classifier_hidden: vec![128, 128],
            output_dim,
            bn: BnPlacement::Both,
        }
    }

    pub fn layer_specs(&self) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
        fn stack(input: usize, hidden: &[usize], output: usize, bn: bool) -> Vec<LayerSpec> {
            let mut specs = Vec::with_capacity(hidden.len() + 1);
            let mut prev = input;
            for &h in hidden {
                specs.push(LayerSpec::new(prev, h, Activation::Relu, bn));
                prev = h;
            }
            specs.push(LayerSpec::new(prev, output, Activation::Identity, false));
            specs
        }
        (
            stack(self.input_dim, &self.encoder_hidden, self.embedding_dim, self.bn.encoder()),
            stack(self.embedding_dim, &self.classifier_hidden, self.output_dim, self.bn.classifier()),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: DenseMatrix,
    pub beta: DenseMatrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: DenseMatrix::filled(1, dim, 1.0),
            beta: DenseMatrix::zeros(1, dim),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub spec: LayerSpec,
    /// `in_dim × out_dim`
    pub weight: DenseMatrix,
    /// `1 × out_dim`
    pub bias: DenseMatrix,
    pub bn: Option<BatchNorm>,
}

impl Dense {
    fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut t = vec![&self.weight, &self.bias];
        if let Some(bn) = &self.bn {
            t.push(&bn.gamma);
            t.push(&bn.beta);
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut t = vec![&mut self.weight, &mut self.bias];
        if let Some(bn) = &mut self.bn {
            t.push(&mut bn.gamma);
            t.push(&mut bn.beta);
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: DenseMatrix,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerTape {
    input: DenseMatrix,
    /// Value fed to the activation (after BN when present).
    pre_act: DenseMatrix,
    bn: Option<BnCache>,
}

/// Cached intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    mode: Mode,
    encoder_layers: usize,
    layers: Vec<LayerTape>,
}

impl ForwardTape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input.rows())
    }
}

pub struct Forward {
    pub latent: DenseMatrix,
    pub logits: DenseMatrix,
    pub tape: ForwardTape,
}

/// Gradients for every learnable tensor, in [`Model::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub tensors: Vec<DenseMatrix>,
}

impl ParamGradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self { tensors: model.tensors().iter().map(|t| DenseMatrix::zeros(t.rows(), t.cols())).collect() }
    }

    pub fn accumulate(&mut self, other: &ParamGradients) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::InvalidState("gradient sets differ in length".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(DenseMatrix::is_finite)
    }
}

/// Model parameters `θ = {ψ, φ}` plus BN running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Vec<Dense>,
    pub classifier: Vec<Dense>,
}

impl Model {
    /// He-uniform weights (bound `√(6/in_dim)`), zero biases, BN scale 1 and shift 0.
    pub fn init(encoder: &[LayerSpec], classifier: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        validate_stack(encoder, classifier)?;
        let mut build = |specs: &[LayerSpec]| -> Vec<Dense> {
            specs
                .iter()
                .map(|&spec| {
                    let bound = (6.0 / spec.in_dim as f64).sqrt();
                    let values = (0..spec.in_dim * spec.out_dim).map(|_| rng.uniform_range(-bound, bound)).collect();
                    Dense {
                        spec,
                        weight: DenseMatrix::from_vec(spec.in_dim, spec.out_dim, values).expect("sized"),
                        bias: DenseMatrix::zeros(1, spec.out_dim),
                        bn: spec.batch_norm.then(|| BatchNorm::new(spec.out_dim)),
                    }
                })
                .collect()
        };
        let encoder = build(encoder);
        let classifier = build(classifier);
        Ok(Self { encoder, classifier })
    }

    pub fn from_architecture(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        let (enc, cls) = arch.layer_specs();
        Self::init(&enc, &cls, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].spec.in_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.spec.out_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.classifier.last().map_or(0, |l| l.spec.out_dim)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(&self.classifier)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain(&mut self.classifier)
    }

    /// Learnable tensors in canonical order: per layer `W, b[, γ, β]`.
    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        self.layers().flat_map(Dense::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers_mut().flat_map(Dense::tensors_mut).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| {
            l.tensors().iter().all(|t| t.is_finite())
                && l.bn.as_ref().is_none_or(|bn| {
                    bn.running_mean.iter().chain(&bn.running_var).all(|v| v.is_finite())
                })
        })
    }

    /// Runs encoder then classifier. Does not touch running statistics; see
    /// [`Model::absorb_batch_stats`].
    pub fn forward(&self, batch: &DenseMatrix, mode: Mode) -> Result<Forward> {
        if batch.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has {} columns, model expects input dimension {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        batch.ensure_finite("batch")?;
        let mut layers = Vec::with_capacity(self.encoder.len() + self.classifier.len());
        let mut x = batch.clone();
        let mut latent = None;
        for (i, layer) in self.layers().enumerate() {
            let (out, tape) = layer_forward(layer, x, mode)?;
            layers.push(tape);
            x = out;
            if i + 1 == self.encoder.len() {
                latent = Some(x.clone());
            }
        }
        let latent = latent.expect("encoder is non-empty");
        if !x.is_finite() || !latent.is_finite() {
            return Err(Error::NumericFailure("forward pass produced non-finite values".into()));
        }
        Ok(Forward { latent, logits: x, tape: ForwardTape { mode, encoder_layers: self.encoder.len(), layers } })
    }

    /// Latent codes only, eval mode.
    pub fn embed(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(batch, Mode::Eval)?.latent)
    }

    /// Moves BN running statistics toward the batch statistics recorded on a
    /// train-mode tape: `running ← 0.9·running + 0.1·batch`.
    pub fn absorb_batch_stats(&mut self, tape: &ForwardTape) -> Result<()> {
        self.check_tape(tape)?;
        if tape.mode != Mode::Train {
            return Ok(());
        }
        for (layer, lt) in self.layers_mut().zip(&tape.layers) {
            if let (Some(bn), Some(cache)) = (&mut layer.bn, &lt.bn) {
                for j in 0..bn.running_mean.len() {
                    bn.running_mean[j] = BN_MOMENTUM * bn.running_mean[j] + (1.0 - BN_MOMENTUM) * cache.mean[j];
                    bn.running_var[j] = BN_MOMENTUM * bn.running_var[j] + (1.0 - BN_MOMENTUM) * cache.var[j];
                }
            }
        }
        Ok(())
    }

    fn check_tape(&self, tape: &ForwardTape) -> Result<()> {
        let n_layers = self.encoder.len() + self.classifier.len();
        if tape.layers.len() != n_layers || tape.encoder_layers != self.encoder.len() {
            return Err(Error::InvalidState(format!(
                "tape has {} layers, model has {n_layers}",
                tape.layers.len()
            )));
        }
        for (i, (layer, lt)) in self.layers().zip(&tape.layers).enumerate() {
            if lt.input.cols() != layer.spec.in_dim
                || lt.pre_act.cols() != layer.spec.out_dim
                || lt.bn.is_some() != layer.bn.is_some()
            {
                return Err(Error::InvalidState(format!("tape layer {i} does not match the model")));
            }
        }
        Ok(())
    }

    /// Gradients of a loss with upstream gradient `d_logits` w.r.t. all parameters.
    pub fn backward_params(&self, tape: &ForwardTape, d_logits: &DenseMatrix) -> Result<ParamGradients> {
        Ok(self.backward(tape, d_logits, true)?.0.expect("requested"))
    }

    /// Gradient w.r.t. the network input, one row per sample.
    pub fn backward_input(&self, tape: &ForwardTape, d_logits: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.backward(tape, d_logits, false)?.1)
    }

    /// Reverse pass returning parameter gradients (when requested) and the input gradient.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        d_logits: &DenseMatrix,
        with_params: bool,
    ) -> Result<(Option<ParamGradients>, DenseMatrix)> {
        self.check_tape(tape)?;
        let m = tape.batch_size();
        if d_logits.shape() != (m, self.output_dim()) {
            return Err(Error::InvalidState(format!(
                "upstream gradient is {:?}, expected ({m}, {})",
                d_logits.shape(),
                self.output_dim()
            )));
        }
        let layers: Vec<&Dense> = self.layers().collect();
        let mut per_layer: Vec<Vec<DenseMatrix>> = Vec::with_capacity(layers.len());
        let mut grad = d_logits.clone();
        for (layer, lt) in layers.iter().zip(&tape.layers).rev() {
            let (dx, tensors) = layer_backward(layer, lt, &grad, tape.mode, with_params)?;
            if with_params {
                per_layer.push(tensors);
            }
            grad = dx;
        }
        if !grad.is_finite() {
            return Err(Error::NumericFailure("input gradient is non-finite".into()));
        }
        let params = with_params.then(|| {
            per_layer.reverse();
            ParamGradients { tensors: per_layer.into_iter().flatten().collect() }
        });
        if let Some(p) = &params {
            if !p.is_finite() {
                return Err(Error::NumericFailure("parameter gradient is non-finite".into()));
            }
        }
        Ok((params, grad))
    }
}

fn validate_stack(encoder: &[LayerSpec], classifier: &[LayerSpec]) -> Result<()> {
    if encoder.is_empty() || classifier.is_empty() {
        return Err(Error::invalid("encoder and classifier need at least one layer each"));
    }
    let all: Vec<&LayerSpec> = encoder.iter().chain(classifier).collect();
    for (i, s) in all.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::invalid(format!("layer {i} has a zero dimension")));
        }
        if i > 0 && all[i - 1].out_dim != s.in_dim {
            return Err(Error::invalid(format!(
                "layer {i} expects {} inputs but previous layer emits {}",
                s.in_dim,
                all[i - 1].out_dim
            )));
        }
    }
    Ok(())
}

fn layer_forward(layer: &Dense, input: DenseMatrix, mode: Mode) -> Result<(DenseMatrix, LayerTape)> {
    let mut z = input.matmul(&layer.weight)?;
    z.add_row_vector(layer.bias.as_slice());
    let (pre_act, bn_cache) = match &layer.bn {
        None => (z, None),
        Some(bn) => {
            let (m, n) = z.shape();
            let (mean, var) = match mode {
                Mode::Train => batch_moments(&z),
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = z;
            for r in 0..m {
                let row = xhat.row_mut(r);
                for j in 0..n {
                    row[j] = (row[j] - mean[j]) * inv_std[j];
                }
            }
            let mut y = xhat.clone();
            let (g, b) = (bn.gamma.as_slice(), bn.beta.as_slice());
            for r in 0..m {
                let row = y.row_mut(r);
                for j in 0..n {
                    row[j] = g[j] * row[j] + b[j];
                }
            }
            (y, Some(BnCache { xhat, mean, var, inv_std }))
        }
    };
    let out = match layer.spec.activation {
        Activation::Identity => pre_act.clone(),
        Activation::Relu => pre_act.map(|v| v.max(0.0)),
    };
    Ok((out, LayerTape { input, pre_act, bn: bn_cache }))
}

/// Per-column mean and biased variance.
fn batch_moments(z: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let m = z.rows() as f64;
    let mean = z.col_means();
    let mut var = vec![0.0; z.cols()];
    for row in z.row_iter() {
        for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

fn layer_backward(
    layer: &Dense,
    tape: &LayerTape,
    d_out: &DenseMatrix,
    mode: Mode,
    with_params: bool,
) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
    let mut d_pre = d_out.clone();
    if layer.spec.activation == Activation::Relu {
        for (g, &p) in d_pre.as_mut_slice().iter_mut().zip(tape.pre_act.as_slice()) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
    }
    let (m, n) = d_pre.shape();
    let mut bn_grads = None;
    let d_z = match (&layer.bn, &tape.bn) {
        (None, None) => d_pre,
        (Some(bn), Some(cache)) => {
            let gamma = bn.gamma.as_slice();
            let mut d_gamma = vec![0.0; n];
            let mut d_beta = vec![0.0; n];
            for r in 0..m {
                for j in 0..n {
                    let g = d_pre.get(r, j);
                    d_gamma[j] += g * cache.xhat.get(r, j);
                    d_beta[j] += g;
                }
            }
            let mut d_z = DenseMatrix::zeros(m, n);
            match mode {
                Mode::Train => {
                    // dz = inv_std/m · (m·dxhat − Σ dxhat − xhat·Σ(dxhat·xhat)), dxhat = dy·γ
                    let mf = m as f64;
                    let sum_dxhat: Vec<f64> = (0..n).map(|j| d_beta[j] * gamma[j]).collect();
                    let sum_dxhat_xhat: Vec<f64> = (0..n).map(|j| d_gamma[j] * gamma[j]).collect();
                    for r in 0..m {
                        for j in 0..n {
                            let dxhat = d_pre.get(r, j) * gamma[j];
                            let v = cache.inv_std[j] / mf
                                * (mf * dxhat - sum_dxhat[j] - cache.xhat.get(r, j) * sum_dxhat_xhat[j]);
                            d_z.set(r, j, v);
                        }
                    }
                }
                Mode::Eval => {
                    for r in 0..m {
                        for j in 0..n {
                            d_z.set(r, j, d_pre.get(r, j) * gamma[j] * cache.inv_std[j]);
                        }
                    }
                }
            }
            if with_params {
                bn_grads = Some((d_gamma, d_beta));
            }
            d_z
        }
        _ => return Err(Error::InvalidState("tape/model BN layout mismatch".into())),
    };
    let d_x = d_z.matmul_t(&layer.weight)?;
    let mut tensors = Vec::new();
    if with_params {
        tensors.push(tape.input.t_matmul(&d_z)?);
        tensors.push(DenseMatrix::from_vec(1, n, d_z.col_sums())?);
        if let Some((dg, db)) = bn_grads {
            tensors.push(DenseMatrix::from_vec(1, n, dg)?);
            tensors.push(DenseMatrix::from_vec(1, n, db)?);
        }
    }
    Ok((d_x, tensors))
}
