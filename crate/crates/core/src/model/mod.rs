//! The classifier/remembering network.
//!
//! * encoder (`Dᶠ`): `x ⊕ c → hidden… → (μ, log σ²)`
//! * classifier head (`Dᶜ`): `μ → class_no` logits, soft-max on top
//! * decoder (`R`): `z ⊕ c → hidden… → input_dim`, sigmoid output
//!
//! Concatenating a one-hot code onto a layer input is the same as adding one
//! column of a separate `out × class_no` weight matrix, which is how the
//! conditioned layers store and apply it. Classification runs the encoder
//! with an all-zero condition, both in training and at test time, because
//! the label is unknown at prediction time.

pub mod checkpoint;
mod losses;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::rng::glorot_uniform;
use crate::numkit::{Graph, NodeId, NumError, OptimizerState, ParamId, ParamTape, Tensor};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use losses::{
    classification_loss, kl_divergence, reconstruction_loss, reparameterize, LatentGaussian, LOG_VAR_MAX,
    LOG_VAR_MIN,
};

pub const MAX_LATENT_DIM: usize = 256;
/// Rows per graph when running inference over large inputs.
const INFERENCE_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("condition class {class} out of range for class_no {class_no}")]
    Condition { class: usize, class_no: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("cannot shrink classes from {from} to {to}")]
    UnsupportedShrink { from: usize, to: usize },
    #[error("input pixel {value} outside [0, 1]")]
    InputRange { value: f64 },
    #[error("numeric guard: {0}")]
    NumericGuard(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Layer sizes of a [`ClareModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub class_no: usize,
}

impl ModelConfig {
    /// 784 → 512 → 256 encoder, 256 → 512 → 784 decoder.
    pub fn mnist(latent_dim: usize, class_no: usize) -> Self {
        Self {
            input_dim: 784,
            encoder_hidden: vec![512, 256],
            decoder_hidden: vec![256, 512],
            latent_dim,
            class_no,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.input_dim == 0 || self.class_no == 0 {
            return bad("input_dim and class_no must be positive");
        }
        if self.latent_dim == 0 || self.latent_dim > MAX_LATENT_DIM {
            return bad("latent_dim must be in 1..=256");
        }
        if self.encoder_hidden.is_empty() || self.decoder_hidden.is_empty() {
            return bad("encoder and decoder need at least one hidden layer");
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&h| h == 0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// One-hot class code of width `class_no`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionCode {
    class: usize,
    width: usize,
}

impl ConditionCode {
    pub fn new(class: usize, width: usize) -> Result<Self, ModelError> {
        if class >= width {
            return Err(ModelError::Condition { class, class_no: width });
        }
        Ok(Self { class, width })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        v[self.class] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Dense layer whose input is `h ⊕ one_hot(c)`; `wc` holds the one-hot columns.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CondDense {
    w: ParamId,
    wc: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayout {
    input: CondDense,
    hidden: Vec<Dense>,
    mu: Dense,
    log_var: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecoderLayout {
    input: CondDense,
    hidden: Vec<Dense>,
    output: Dense,
}

impl DecoderLayout {
    fn record_logits(
        &self,
        g: &mut Graph,
        tape: &ParamTape,
        z: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, NumError> {
        let mut h = g.linear(tape, z, self.input.w, Some(self.input.b))?;
        h = g.add_columns(tape, h, self.input.wc, labels)?;
        h = g.relu(h)?;
        for layer in &self.hidden {
            h = g.linear(tape, h, layer.w, Some(layer.b))?;
            h = g.relu(h)?;
        }
        g.linear(tape, h, self.output.w, Some(self.output.b))
    }

    pub(crate) fn class_no(&self, tape: &ParamTape) -> usize {
        tape.param(self.input.wc).shape()[1]
    }

    pub(crate) fn latent_dim(&self, tape: &ParamTape) -> usize {
        tape.param(self.input.w).shape()[1]
    }

    pub(crate) fn output_dim(&self, tape: &ParamTape) -> usize {
        tape.param(self.output.w).shape()[0]
    }

    /// Sigmoid reconstructions, pinned strictly inside (0, 1).
    pub(crate) fn decode(&self, tape: &ParamTape, z: &Tensor, labels: &[usize]) -> Result<Tensor, ModelError> {
        let class_no = self.class_no(tape);
        check_labels(labels, class_no)?;
        let (batch, dz) = z.dims2()?;
        let expected = self.latent_dim(tape);
        if dz != expected || labels.len() != batch {
            return Err(NumError::Shape {
                op: "decode",
                left: z.shape().to_vec(),
                right: vec![labels.len(), expected],
            }
            .into());
        }
        let out_dim = self.output_dim(tape);
        let mut out = Vec::with_capacity(batch * out_dim);
        for start in (0..batch).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(batch);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let zn = g.input(z.gather_rows(&idx))?;
            let logits = self.record_logits(&mut g, tape, zn, &labels[start..end])?;
            out.extend(g.value(logits).data().iter().map(|&l| open_unit(crate::numkit::sigmoid_scalar(l))));
        }
        Ok(Tensor::new(vec![batch, out_dim], out)?)
    }

    /// Copies the decoder parameters into a standalone tape.
    pub(crate) fn extract(&self, tape: &ParamTape) -> Result<(ParamTape, DecoderLayout), NumError> {
        let mut out = ParamTape::new();
        let mut copy = |id: ParamId| out.push(tape.name(id), tape.param(id).clone());
        let input = CondDense {
            w: copy(self.input.w)?,
            wc: copy(self.input.wc)?,
            b: copy(self.input.b)?,
        };
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for l in &self.hidden {
            hidden.push(Dense {
                w: copy(l.w)?,
                b: copy(l.b)?,
            });
        }
        let output = Dense {
            w: copy(self.output.w)?,
            b: copy(self.output.b)?,
        };
        Ok((out, DecoderLayout { input, hidden, output }))
    }

    /// Resolves a decoder layout by parameter name.
    pub(crate) fn from_names(tape: &ParamTape) -> Result<Self, ModelError> {
        let input = cond_dense_by_name(tape, "decoder.0")?;
        let mut hidden = Vec::new();
        let mut i = 1;
        while tape.id(&format!("decoder.{i}.weight")).is_some() {
            hidden.push(dense_by_name(tape, &format!("decoder.{i}"))?);
            i += 1;
        }
        let output = dense_by_name(tape, "decoder.out")?;
        Ok(Self { input, hidden, output })
    }
}

/// Nearest representable value inside the open unit interval.
fn open_unit(p: f64) -> f64 {
    const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;
    p.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

fn check_labels(labels: &[usize], class_no: usize) -> Result<(), ModelError> {
    match labels.iter().find(|&&c| c >= class_no) {
        Some(&class) => Err(ModelError::Condition { class, class_no }),
        None => Ok(()),
    }
}

fn missing(name: &str) -> ModelError {
    ModelError::Config(format!("missing parameter `{name}`"))
}

fn dense_by_name(tape: &ParamTape, prefix: &str) -> Result<Dense, ModelError> {
    let get = |s: &str| {
        let n = format!("{prefix}.{s}");
        tape.id(&n).ok_or_else(|| missing(&n))
    };
    Ok(Dense {
        w: get("weight")?,
        b: get("bias")?,
    })
}

fn cond_dense_by_name(tape: &ParamTape, prefix: &str) -> Result<CondDense, ModelError> {
    let get = |s: &str| {
        let n = format!("{prefix}.{s}");
        tape.id(&n).ok_or_else(|| missing(&n))
    };
    Ok(CondDense {
        w: get("weight")?,
        wc: get("cond_weight")?,
        b: get("bias")?,
    })
}

/// Scalar loss nodes recorded for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub classification: NodeId,
    pub reconstruction: NodeId,
    pub kl: NodeId,
    pub total: NodeId,
}

/// Values of the loss terms; `total = classification + reconstruction + beta·kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct ClareModel {
    config: ModelConfig,
    tape: ParamTape,
    encoder: EncoderLayout,
    classifier: Dense,
    decoder: DecoderLayout,
    steps: u64,
}

/// Checkpoint entry holding the optimizer step count.
const STEPS_ENTRY: &str = "meta.steps";

fn push_dense<R: Rng + ?Sized>(
    tape: &mut ParamTape,
    rng: &mut R,
    name: &str,
    input: usize,
    output: usize,
) -> Result<Dense, NumError> {
    Ok(Dense {
        w: tape.push(
            format!("{name}.weight"),
            glorot_uniform(rng, &[output, input], input, output),
        )?,
        b: tape.push(format!("{name}.bias"), Tensor::zeros(&[output]))?,
    })
}

fn push_cond_dense<R: Rng + ?Sized>(
    tape: &mut ParamTape,
    rng: &mut R,
    name: &str,
    input: usize,
    classes: usize,
    output: usize,
) -> Result<CondDense, NumError> {
    let fan_in = input + classes;
    Ok(CondDense {
        w: tape.push(
            format!("{name}.weight"),
            glorot_uniform(rng, &[output, input], fan_in, output),
        )?,
        wc: tape.push(
            format!("{name}.cond_weight"),
            glorot_uniform(rng, &[output, classes], fan_in, output),
        )?,
        b: tape.push(format!("{name}.bias"), Tensor::zeros(&[output]))?,
    })
}

impl ClareModel {
    /// Fresh model: Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut tape = ParamTape::new();
        let c = config.class_no;
        let enc = &config.encoder_hidden;
        let dec = &config.decoder_hidden;

        let input = push_cond_dense(&mut tape, rng, "encoder.0", config.input_dim, c, enc[0])?;
        let mut hidden = Vec::new();
        for (i, pair) in enc.windows(2).enumerate() {
            hidden.push(push_dense(&mut tape, rng, &format!("encoder.{}", i + 1), pair[0], pair[1])?);
        }
        let last = *enc.last().expect("validated non-empty");
        let mu = push_dense(&mut tape, rng, "encoder.mu", last, config.latent_dim)?;
        let log_var = push_dense(&mut tape, rng, "encoder.log_var", last, config.latent_dim)?;
        let encoder = EncoderLayout {
            input,
            hidden,
            mu,
            log_var,
        };

        let classifier = push_dense(&mut tape, rng, "classifier", config.latent_dim, c)?;

        let input = push_cond_dense(&mut tape, rng, "decoder.0", config.latent_dim, c, dec[0])?;
        let mut hidden = Vec::new();
        for (i, pair) in dec.windows(2).enumerate() {
            hidden.push(push_dense(&mut tape, rng, &format!("decoder.{}", i + 1), pair[0], pair[1])?);
        }
        let last = *dec.last().expect("validated non-empty");
        let output = push_dense(&mut tape, rng, "decoder.out", last, config.input_dim)?;
        let decoder = DecoderLayout { input, hidden, output };

        Ok(Self {
            config,
            tape,
            encoder,
            classifier,
            decoder,
            steps: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_no(&self) -> usize {
        self.config.class_no
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Optimizer updates applied so far, carried through expansion and checkpoints.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn tape(&self) -> &ParamTape {
        &self.tape
    }

    /// Direct parameter access, for tests and surgery such as zeroing slices.
    pub fn tape_mut(&mut self) -> &mut ParamTape {
        &mut self.tape
    }

    pub(crate) fn decoder_layout(&self) -> &DecoderLayout {
        &self.decoder
    }

    fn check_input(&self, x: &Tensor) -> Result<usize, ModelError> {
        let (batch, cols) = x.dims2()?;
        if cols != self.config.input_dim {
            return Err(NumError::Shape {
                op: "model input",
                left: x.shape().to_vec(),
                right: vec![batch, self.config.input_dim],
            }
            .into());
        }
        if let Some(&value) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ModelError::InputRange { value });
        }
        Ok(batch)
    }

    /// Shared first-layer term `x·Wᵀ + b`, before the condition columns are added.
    fn record_input_layer(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, NumError> {
        let l = self.encoder.input;
        g.linear(&self.tape, x, l.w, Some(l.b))
    }

    fn record_hidden(&self, g: &mut Graph, pre: NodeId) -> Result<NodeId, NumError> {
        let mut h = g.relu(pre)?;
        for layer in &self.encoder.hidden {
            h = g.linear(&self.tape, h, layer.w, Some(layer.b))?;
            h = g.relu(h)?;
        }
        Ok(h)
    }

    /// `(μ, clamped log σ²)` nodes for the encoder on `x ⊕ c`; `labels = None`
    /// is the all-zero condition.
    fn record_encoder(
        &self,
        g: &mut Graph,
        input_term: NodeId,
        labels: Option<&[usize]>,
    ) -> Result<(NodeId, NodeId), NumError> {
        let pre = match labels {
            Some(labels) => g.add_columns(&self.tape, input_term, self.encoder.input.wc, labels)?,
            None => input_term,
        };
        let h = self.record_hidden(g, pre)?;
        let mu = g.linear(&self.tape, h, self.encoder.mu.w, Some(self.encoder.mu.b))?;
        let lv = g.linear(&self.tape, h, self.encoder.log_var.w, Some(self.encoder.log_var.b))?;
        let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok((mu, lv))
    }

    /// Classifier logits from the zero-conditioned encoder mean.
    fn record_logits(&self, g: &mut Graph, input_term: NodeId) -> Result<NodeId, NumError> {
        let h = self.record_hidden(g, input_term)?;
        let mu = g.linear(&self.tape, h, self.encoder.mu.w, Some(self.encoder.mu.b))?;
        g.linear(&self.tape, mu, self.classifier.w, Some(self.classifier.b))
    }

    /// Encoder distribution for `x` conditioned on `labels`.
    pub fn encode(&self, x: &Tensor, labels: &[usize]) -> Result<LatentGaussian, ModelError> {
        let batch = self.check_input(x)?;
        check_labels(labels, self.class_no())?;
        if labels.len() != batch {
            return Err(NumError::Shape {
                op: "encode",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            }
            .into());
        }
        self.encode_inner(x, Some(labels))
    }

    /// Encoder distribution under the all-zero condition.
    pub fn encode_unconditioned(&self, x: &Tensor) -> Result<LatentGaussian, ModelError> {
        self.check_input(x)?;
        self.encode_inner(x, None)
    }

    fn encode_inner(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<LatentGaussian, ModelError> {
        let mut g = Graph::new();
        let xn = g.input(x.clone())?;
        let term = self.record_input_layer(&mut g, xn)?;
        let (mu, lv) = self.record_encoder(&mut g, term, labels)?;
        LatentGaussian::new(g.value(mu).clone(), g.value(lv).clone())
    }

    /// Reconstructions `x̂ ∈ (0, 1)` for latent codes `z` under condition `labels`.
    pub fn decode(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor, ModelError> {
        self.decoder.decode(&self.tape, z, labels)
    }

    /// Pre-soft-max class scores.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let batch = self.check_input(x)?;
        let mut out = Vec::with_capacity(batch * self.class_no());
        for start in (0..batch).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(batch);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let xn = g.input(x.gather_rows(&idx))?;
            let term = self.record_input_layer(&mut g, xn)?;
            let logits = self.record_logits(&mut g, term)?;
            out.extend_from_slice(g.value(logits).data());
        }
        Ok(Tensor::new(vec![batch, self.class_no()], out)?)
    }

    /// Row-stochastic class probabilities.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(crate::numkit::softmax_rows(&self.logits(x)?))
    }

    /// Records the three loss terms and their weighted total for one batch.
    pub fn record_losses(
        &self,
        g: &mut Graph,
        x: &Tensor,
        labels: &[usize],
        noise: &Tensor,
        beta: f64,
    ) -> Result<LossNodes, ModelError> {
        let batch = self.check_input(x)?;
        check_labels(labels, self.class_no())?;
        if labels.len() != batch || noise.shape() != [batch, self.latent_dim()] {
            return Err(NumError::Shape {
                op: "total_loss",
                left: vec![batch, self.latent_dim()],
                right: noise.shape().to_vec(),
            }
            .into());
        }
        let xn = g.input(x.clone())?;
        let term = self.record_input_layer(g, xn)?;

        // Remembering branch: conditioned encoder, sampled z, conditioned decoder.
        let (mu, lv) = self.record_encoder(g, term, Some(labels))?;
        let half = g.scale(lv, 0.5)?;
        let std = g.exp(half)?;
        let eps = g.input(noise.clone())?;
        let spread = g.mul(std, eps)?;
        let z = g.add(mu, spread)?;
        let recon_logits = self.decoder.record_logits(g, &self.tape, z, labels)?;
        let reconstruction = g.sigmoid_bce(recon_logits, x.clone())?;
        let kl = g.gaussian_kl(mu, lv)?;

        // Discriminating branch: zero-conditioned μ through the classifier head.
        let logits = self.record_logits(g, term)?;
        let classification = g.softmax_cross_entropy(logits, labels)?;

        let total = g.weighted_sum(&[(classification, 1.0), (reconstruction, 1.0), (kl, beta)])?;
        Ok(LossNodes {
            classification,
            reconstruction,
            kl,
            total,
        })
    }

    /// Evaluates `L_total = L_cls + (L_rec + β·L_kl)` without touching gradients.
    pub fn total_loss(&self, x: &Tensor, labels: &[usize], noise: &Tensor, beta: f64) -> Result<LossBreakdown, ModelError> {
        let mut g = Graph::new();
        let nodes = self.record_losses(&mut g, x, labels, noise, beta)?;
        Ok(breakdown(&g, &nodes, beta))
    }

    /// Zeroes gradients and fills them with `∂L_total/∂θ` for this batch.
    pub fn compute_gradients(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        noise: &Tensor,
        beta: f64,
    ) -> Result<LossBreakdown, ModelError> {
        self.tape.zero_grads();
        let mut g = Graph::new();
        let nodes = self.record_losses(&mut g, x, labels, noise, beta)?;
        g.backward(nodes.total, &mut self.tape)?;
        Ok(breakdown(&g, &nodes, beta))
    }

    /// Zeroes gradients, runs forward and backward, and applies one optimizer update.
    pub fn train_step(
        &mut self,
        optimizer: &mut OptimizerState,
        x: &Tensor,
        labels: &[usize],
        noise: &Tensor,
        beta: f64,
    ) -> Result<LossBreakdown, ModelError> {
        let losses = self.compute_gradients(x, labels, noise, beta)?;
        optimizer.step(&mut self.tape)?;
        self.steps += 1;
        Ok(losses)
    }

    /// Widens every class-dependent slice to `new_class_no`.
    ///
    /// Existing weights are copied bit-for-bit; new condition columns and
    /// classifier rows are freshly initialized, new classifier biases are zero.
    pub fn expand_classes<R: Rng + ?Sized>(&self, new_class_no: usize, rng: &mut R) -> Result<ClareModel, ModelError> {
        let old = self.class_no();
        if new_class_no <= old {
            return Err(ModelError::UnsupportedShrink {
                from: old,
                to: new_class_no,
            });
        }
        let mut config = self.config.clone();
        config.class_no = new_class_no;
        let mut tape = self.tape.clone();

        let widen_cols = |t: &Tensor, rng: &mut R, fan_in: usize| -> Result<Tensor, NumError> {
            let (rows, cols) = t.dims2()?;
            let extra = glorot_uniform(rng, &[rows, new_class_no - cols], fan_in, rows);
            let mut data = Vec::with_capacity(rows * new_class_no);
            for i in 0..rows {
                data.extend_from_slice(t.row(i));
                data.extend_from_slice(extra.row(i));
            }
            Tensor::new(vec![rows, new_class_no], data)
        };
        let enc_wc = widen_cols(
            self.tape.param(self.encoder.input.wc),
            rng,
            config.input_dim + new_class_no,
        )?;
        let dec_wc = widen_cols(
            self.tape.param(self.decoder.input.wc),
            rng,
            config.latent_dim + new_class_no,
        )?;
        let cls_w = {
            let t = self.tape.param(self.classifier.w);
            let extra = glorot_uniform(
                rng,
                &[new_class_no - old, config.latent_dim],
                config.latent_dim,
                new_class_no,
            );
            Tensor::concat_rows(&[t, &extra])?
        };
        let cls_b = {
            let mut b = self.tape.param(self.classifier.b).data().to_vec();
            b.resize(new_class_no, 0.0);
            Tensor::vector(b)
        };
        replace_param(&mut tape, self.encoder.input.wc, enc_wc);
        replace_param(&mut tape, self.decoder.input.wc, dec_wc);
        replace_param(&mut tape, self.classifier.w, cls_w);
        replace_param(&mut tape, self.classifier.b, cls_b);

        Ok(ClareModel {
            config,
            tape,
            encoder: self.encoder.clone(),
            classifier: self.classifier,
            decoder: self.decoder.clone(),
            steps: self.steps,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            class_no: self.config.class_no as u32,
            latent_dim: self.config.latent_dim as u32,
            entries: self
                .tape
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .chain([(STEPS_ENTRY.to_string(), Tensor::scalar(self.steps as f64))])
                .collect(),
        }
    }

    /// Rebuilds a model from named parameters, inferring layer sizes from shapes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut tape = ParamTape::new();
        let mut steps = 0;
        for (name, t) in &ckpt.entries {
            if name == STEPS_ENTRY {
                steps = match t.data() {
                    [v] if *v >= 0.0 && v.fract() == 0.0 => *v as u64,
                    _ => return Err(ModelError::Config(format!("malformed `{STEPS_ENTRY}` entry"))),
                };
            } else {
                tape.push(name.clone(), t.clone())?;
            }
        }
        let input = cond_dense_by_name(&tape, "encoder.0")?;
        let mut hidden = Vec::new();
        let mut i = 1;
        while tape.id(&format!("encoder.{i}.weight")).is_some() {
            hidden.push(dense_by_name(&tape, &format!("encoder.{i}"))?);
            i += 1;
        }
        let encoder = EncoderLayout {
            input,
            hidden,
            mu: dense_by_name(&tape, "encoder.mu")?,
            log_var: dense_by_name(&tape, "encoder.log_var")?,
        };
        let classifier = dense_by_name(&tape, "classifier")?;
        let decoder = DecoderLayout::from_names(&tape)?;

        let dims = |id: ParamId| tape.param(id).dims2();
        let (h0, input_dim) = dims(encoder.input.w)?;
        let mut encoder_hidden = vec![h0];
        for l in &encoder.hidden {
            encoder_hidden.push(dims(l.w)?.0);
        }
        let (g0, latent_dim) = dims(decoder.input.w)?;
        let mut decoder_hidden = vec![g0];
        for l in &decoder.hidden {
            decoder_hidden.push(dims(l.w)?.0);
        }
        let config = ModelConfig {
            input_dim,
            encoder_hidden,
            decoder_hidden,
            latent_dim,
            class_no: ckpt.class_no as usize,
        };
        config.validate()?;
        if latent_dim != ckpt.latent_dim as usize {
            return Err(ModelError::Config(format!(
                "header latent_dim {} disagrees with decoder input width {latent_dim}",
                ckpt.latent_dim
            )));
        }
        let model = Self {
            config,
            tape,
            encoder,
            classifier,
            decoder,
            steps,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Verifies every parameter shape against the configuration.
    fn check_shapes(&self) -> Result<(), ModelError> {
        let c = &self.config;
        let expect = |id: ParamId, shape: &[usize]| -> Result<(), ModelError> {
            let actual = self.tape.param(id).shape();
            if actual != shape {
                return Err(ModelError::Config(format!(
                    "parameter `{}` has shape {actual:?}, expected {shape:?}",
                    self.tape.name(id)
                )));
            }
            Ok(())
        };
        let enc = &c.encoder_hidden;
        expect(self.encoder.input.w, &[enc[0], c.input_dim])?;
        expect(self.encoder.input.wc, &[enc[0], c.class_no])?;
        expect(self.encoder.input.b, &[enc[0]])?;
        for (l, pair) in self.encoder.hidden.iter().zip(enc.windows(2)) {
            expect(l.w, &[pair[1], pair[0]])?;
            expect(l.b, &[pair[1]])?;
        }
        let last = *enc.last().unwrap();
        for head in [self.encoder.mu, self.encoder.log_var] {
            expect(head.w, &[c.latent_dim, last])?;
            expect(head.b, &[c.latent_dim])?;
        }
        expect(self.classifier.w, &[c.class_no, c.latent_dim])?;
        expect(self.classifier.b, &[c.class_no])?;
        let dec = &c.decoder_hidden;
        expect(self.decoder.input.w, &[dec[0], c.latent_dim])?;
        expect(self.decoder.input.wc, &[dec[0], c.class_no])?;
        expect(self.decoder.input.b, &[dec[0]])?;
        for (l, pair) in self.decoder.hidden.iter().zip(dec.windows(2)) {
            expect(l.w, &[pair[1], pair[0]])?;
            expect(l.b, &[pair[1]])?;
        }
        expect(self.decoder.output.w, &[c.input_dim, *dec.last().unwrap()])?;
        expect(self.decoder.output.b, &[c.input_dim])?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        let bytes = self.to_checkpoint().to_bytes();
        std::fs::write(path.as_ref(), bytes).map_err(CheckpointError::Io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path.as_ref()).map_err(CheckpointError::Io)?;
        Self::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
    }
}

/// Swaps in a parameter of a different shape, resetting its gradient buffer.
fn replace_param(tape: &mut ParamTape, id: ParamId, value: Tensor) {
    *tape.grad_mut(id) = Tensor::zeros(value.shape());
    *tape.param_mut(id) = value;
}

fn breakdown(g: &Graph, nodes: &LossNodes, beta: f64) -> LossBreakdown {
    LossBreakdown {
        total: g.scalar(nodes.total),
        classification: g.scalar(nodes.classification),
        reconstruction: g.scalar(nodes.reconstruction),
        kl: g.scalar(nodes.kl),
        beta,
    }
}

#[cfg(test)]
mod tests;
