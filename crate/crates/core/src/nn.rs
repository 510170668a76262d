//! Dense feed-forward network with ReLU hidden layers and a softmax head.
//!
//! Parameters live in one flat `f64` buffer. Layer `i` occupies a row-major
//! weight block of shape `(dims[i + 1], dims[i])` followed by its bias vector,
//! so aggregation and SGD are plain element-wise loops over the buffer.
//!
//! The training loss is a convex mix of hard-label cross-entropy and the
//! KL divergence from a soft-target row to the prediction:
//!
//! ```text
//! loss = rho * CE(p, y) + (1 - rho) * KL(q || p)
//! ```
//!
//! Both terms share the logit gradient `p - target`, which gives the
//! closed form `dL/dz = p - rho * onehot(y) - (1 - rho) * q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp for probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(q) == 1` for soft-target rows fed into the loss.
pub const SOFT_ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Borrowed view of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Validation(format!(
            "a network needs at least an input and an output width, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Validation(format!("layer widths must be positive, got {dims:?}")));
    }
    Ok(())
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl ModelParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![0.0; param_count(dims)],
        })
    }

    pub fn from_flat(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_dims(dims)?;
        let expected = param_count(dims);
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "layout {dims:?} holds {expected} parameters, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Builds parameters from explicit `(weights[out][in], bias[out])` layers.
    pub fn from_layers(layers: &[(Vec<Vec<f64>>, Vec<f64>)]) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Validation("empty layer list".into()))?;
        let mut dims = vec![first.0.first().map_or(0, Vec::len)];
        let mut data = Vec::new();
        for (i, (w, b)) in layers.iter().enumerate() {
            let in_dim = *dims.last().unwrap();
            if w.len() != b.len() || w.iter().any(|row| row.len() != in_dim) {
                return Err(Error::Dimension(format!(
                    "layer {i} does not chain: expected rows of width {in_dim} and one bias per row"
                )));
            }
            for row in w {
                data.extend_from_slice(row);
            }
            data.extend_from_slice(b);
            dims.push(b.len());
        }
        Self::from_flat(&dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Wire size of the parameter vector as 64-bit reals.
    pub fn byte_size(&self) -> u64 {
        8 * self.data.len() as u64
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn layer(&self, index: usize) -> LayerView<'_> {
        let offset: usize = param_count(&self.dims[..=index]);
        let (in_dim, out_dim) = (self.dims[index], self.dims[index + 1]);
        let w_end = offset + in_dim * out_dim;
        LayerView {
            in_dim,
            out_dim,
            weights: &self.data[offset..w_end],
            bias: &self.data[w_end..w_end + out_dim],
        }
    }

    fn layer_offset(&self, index: usize) -> usize {
        param_count(&self.dims[..=index])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_congruent(&self, other: &ModelParams) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Dimension(format!(
                "parameter layouts differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.ensure_congruent(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> Result<f64> {
        self.ensure_congruent(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Parameter-space difference `after - before`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDelta(ModelParams);

impl ModelDelta {
    pub fn between(before: &ModelParams, after: &ModelParams) -> Result<Self> {
        before.ensure_congruent(after)?;
        let data = after
            .data
            .iter()
            .zip(&before.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self(ModelParams {
            dims: before.dims.clone(),
            data,
        }))
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self(ModelParams {
            dims: params.dims.clone(),
            data: vec![0.0; params.len()],
        })
    }

    pub fn from_params(params: ModelParams) -> Self {
        Self(params)
    }

    pub fn as_params(&self) -> &ModelParams {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0.data
    }

    pub fn byte_size(&self) -> u64 {
        self.0.byte_size()
    }

    /// Returns `base + self`.
    pub fn apply_to(&self, base: &ModelParams) -> Result<ModelParams> {
        let mut out = base.clone();
        out.axpy(1.0, &self.0)?;
        Ok(out)
    }
}

/// Gradients share the parameter layout.
pub type Gradient = ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        Self { logits, probs }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Weight `rho` on the hard-label term; `1 - rho` goes to the soft-target term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    rho: f64,
}

impl LossWeights {
    pub fn new(rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Validation(format!("rho must lie in [0, 1], got {rho}")));
        }
        Ok(Self { rho })
    }

    pub fn hard_only() -> Self {
        Self { rho: 1.0 }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

fn check_soft_row(soft_row: &[f64], classes: usize) -> Result<()> {
    if soft_row.len() != classes {
        return Err(Error::Dimension(format!(
            "soft row has {} entries, prediction has {classes}",
            soft_row.len()
        )));
    }
    let sum: f64 = soft_row.iter().sum();
    if (sum - 1.0).abs() > SOFT_ROW_TOLERANCE || soft_row.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
        return Err(Error::Validation(format!(
            "soft row is not a probability vector (sum = {sum})"
        )));
    }
    Ok(())
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Validation(format!(
            "hard label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Cross-entropy of `probs` against the hard label.
pub fn cross_entropy(probs: &[f64], hard_label: usize) -> f64 {
    -probs[hard_label].max(PROB_FLOOR).ln()
}

/// `KL(target || probs)`; terms with zero target mass contribute nothing.
pub fn kl_divergence(target: &[f64], probs: &[f64]) -> f64 {
    target
        .iter()
        .zip(probs)
        .filter(|(&q, _)| q > 0.0)
        .map(|(&q, &p)| q * (q.max(PROB_FLOOR).ln() - p.max(PROB_FLOOR).ln()))
        .sum()
}

fn mixed_loss_unchecked(probs: &[f64], hard_label: usize, soft_row: &[f64], rho: f64) -> f64 {
    let ce = cross_entropy(probs, hard_label);
    if rho == 1.0 {
        return ce;
    }
    rho * ce + (1.0 - rho) * kl_divergence(soft_row, probs)
}

pub fn mixed_loss(
    pred: &Prediction,
    hard_label: usize,
    soft_row: &[f64],
    weights: LossWeights,
) -> Result<f64> {
    let classes = pred.num_classes();
    check_label(hard_label, classes)?;
    check_soft_row(soft_row, classes)?;
    Ok(mixed_loss_unchecked(&pred.probs, hard_label, soft_row, weights.rho))
}

/// One supervised example with its soft-target row.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub label: usize,
    pub soft: &'a [f64],
}

/// Per-layer activations kept between the forward and backward passes.
struct Activations {
    /// `acts[0]` is the input, `acts[i]` the post-activation output of layer `i - 1`.
    /// The final entry holds the raw logits.
    acts: Vec<Vec<f64>>,
}

impl Activations {
    fn new(dims: &[usize]) -> Self {
        Self {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }
}

fn forward_into(params: &ModelParams, input: &[f64], scratch: &mut Activations) {
    scratch.acts[0].copy_from_slice(input);
    let last = params.num_layers() - 1;
    for l in 0..params.num_layers() {
        let layer = params.layer(l);
        let (head, tail) = scratch.acts.split_at_mut(l + 1);
        let x = &head[l];
        let out = &mut tail[0];
        for (o, (row, b)) in out
            .iter_mut()
            .zip(layer.weights.chunks_exact(layer.in_dim).zip(layer.bias))
        {
            let z = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b;
            *o = if l < last { z.max(0.0) } else { z };
        }
    }
}

fn check_input(params: &ModelParams, input: &[f64]) -> Result<()> {
    if input.len() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input has length {}, network expects {}",
            input.len(),
            params.input_dim()
        )));
    }
    Ok(())
}

pub fn forward(params: &ModelParams, input: &[f64]) -> Result<Prediction> {
    check_input(params, input)?;
    let mut scratch = Activations::new(params.dims());
    forward_into(params, input, &mut scratch);
    Ok(Prediction::from_logits(scratch.acts.pop().unwrap()))
}

/// Reusable forward evaluator for scoring many inputs against one model.
pub struct Predictor<'a> {
    params: &'a ModelParams,
    scratch: Activations,
}

impl<'a> Predictor<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            scratch: Activations::new(params.dims()),
        }
    }

    /// Softmax probabilities for `input`, borrowed from internal scratch.
    pub fn probs(&mut self, input: &[f64]) -> Result<&[f64]> {
        check_input(self.params, input)?;
        forward_into(self.params, input, &mut self.scratch);
        let out = self.scratch.acts.last_mut().unwrap();
        softmax_in_place(out);
        Ok(out)
    }

    pub fn predict(&mut self, input: &[f64]) -> Result<Prediction> {
        check_input(self.params, input)?;
        forward_into(self.params, input, &mut self.scratch);
        Ok(Prediction::from_logits(self.scratch.acts.last().unwrap().clone()))
    }
}

/// Mean mixed-loss gradient over `batch`.
pub fn backward(params: &ModelParams, batch: &[Sample<'_>], weights: LossWeights) -> Result<Gradient> {
    backward_with_loss(params, batch, weights).map(|(g, _)| g)
}

/// Mean mixed-loss gradient over `batch` together with the mean loss value.
pub fn backward_with_loss(
    params: &ModelParams,
    batch: &[Sample<'_>],
    weights: LossWeights,
) -> Result<(Gradient, f64)> {
    if batch.is_empty() {
        return Err(Error::Validation("backward needs a nonempty batch".into()));
    }
    let classes = params.output_dim();
    for s in batch {
        check_input(params, s.input)?;
        check_label(s.label, classes)?;
        check_soft_row(s.soft, classes)?;
    }

    let rho = weights.rho;
    let dims = params.dims();
    let layers = params.num_layers();
    let mut grad = ModelParams::zeros(dims)?;
    let mut scratch = Activations::new(dims);
    let mut deltas: Vec<Vec<f64>> = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
    let mut total_loss = 0.0;

    for s in batch {
        forward_into(params, s.input, &mut scratch);
        let probs = scratch.acts.last_mut().unwrap();
        softmax_in_place(probs);
        total_loss += mixed_loss_unchecked(probs, s.label, s.soft, rho);

        let top = &mut deltas[layers - 1];
        for (c, d) in top.iter_mut().enumerate() {
            let hard = if c == s.label { rho } else { 0.0 };
            *d = probs[c] - hard - (1.0 - rho) * s.soft[c];
        }

        for l in (0..layers).rev() {
            let layer = params.layer(l);
            let offset = params.layer_offset(l);
            let w_len = layer.in_dim * layer.out_dim;
            let x = &scratch.acts[l];
            {
                let (gw, gb) = grad.data[offset..offset + w_len + layer.out_dim].split_at_mut(w_len);
                for (o, (grow, &d)) in gw.chunks_exact_mut(layer.in_dim).zip(&deltas[l]).enumerate() {
                    gb[o] += d;
                    if d != 0.0 {
                        for (g, v) in grow.iter_mut().zip(x) {
                            *g += d * v;
                        }
                    }
                }
            }
            if l > 0 {
                let (lower, upper) = deltas.split_at_mut(l);
                let below = &mut lower[l - 1];
                below.iter_mut().for_each(|v| *v = 0.0);
                for (row, &d) in layer.weights.chunks_exact(layer.in_dim).zip(&upper[0]) {
                    if d != 0.0 {
                        for (b, w) in below.iter_mut().zip(row) {
                            *b += d * w;
                        }
                    }
                }
                // ReLU derivative on the hidden activation feeding this layer.
                for (b, &a) in below.iter_mut().zip(&scratch.acts[l]) {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
        }
    }

    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((grad, total_loss / n))
}

/// Returns `params - eta * grad`.
pub fn sgd_step(params: &ModelParams, grad: &Gradient, eta: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grad, eta)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut ModelParams, grad: &Gradient, eta: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Validation(format!("learning rate must be finite and >= 0, got {eta}")));
    }
    params.axpy(-eta, grad)?;
    if !params.is_finite() {
        return Err(Error::Validation("non-finite parameter after SGD step".into()));
    }
    Ok(())
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(dims: &[usize], seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..params.num_layers() {
        let (in_dim, out_dim) = (dims[l], dims[l + 1]);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let offset = params.layer_offset(l);
        for w in &mut params.data[offset..offset + in_dim * out_dim] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(params)
}
