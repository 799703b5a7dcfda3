//! CTR prediction model.
//!
//! Every example is reduced to the sum of the embeddings of its features,
//! then fed through a fully-connected stack with `tanh` hidden units and a
//! single sigmoid output. The same functions are used by the distributed
//! engine and by the single-process reference trainer, so this module is the
//! only place where model arithmetic lives.
//!
//! Parameters and gradients are `f32`. Activations and every reduction over
//! examples are carried out in `f64` and rounded once at the end.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feature index into the sparse embedding table.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
pub struct ParamKey(pub u64);

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for ParamKey {
    fn from(v: u64) -> Self {
        ParamKey(v)
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter {0} is not resolvable in the sparse view")]
    MissingKey(ParamKey),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("example has no features")]
    EmptyFeatures,
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// One embedding row plus its optimizer accumulator.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SparseParam {
    pub embedding: Vec<f32>,
    pub opt_state: Vec<f32>,
}

impl SparseParam {
    pub fn zeros(width: usize) -> Self {
        SparseParam {
            embedding: vec![0.0; width],
            opt_state: vec![0.0; width],
        }
    }

    pub fn from_embedding(embedding: Vec<f32>) -> Self {
        let opt_state = vec![0.0; embedding.len()];
        SparseParam { embedding, opt_state }
    }

    pub fn width(&self) -> usize {
        self.embedding.len()
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.iter().chain(&self.opt_state).all(|v| v.is_finite())
    }
}

/// Weights of the fully-connected layers, laid out layer by layer as a
/// row-major `fan_out x fan_in` matrix followed by `fan_out` biases.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DenseParams {
    pub weights: Vec<f32>,
    pub layer_dims: Vec<usize>,
}

impl DenseParams {
    pub fn param_count(layer_dims: &[usize]) -> usize {
        layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_layer_dims(layer_dims)?;
        Ok(DenseParams {
            weights: vec![0.0; Self::param_count(layer_dims)],
            layer_dims: layer_dims.to_vec(),
        })
    }

    /// Uniform initialization in `[-range, range]` from a seeded generator.
    pub fn init(layer_dims: &[usize], seed: u64, range: f32) -> Result<Self> {
        validate_layer_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..Self::param_count(layer_dims))
            .map(|_| rng.random_range(-range..=range))
            .collect();
        Ok(DenseParams {
            weights,
            layer_dims: layer_dims.to_vec(),
        })
    }

    pub fn input_width(&self) -> usize {
        self.layer_dims[0]
    }

    fn check(&self) -> Result<()> {
        validate_layer_dims(&self.layer_dims)?;
        let expected = Self::param_count(&self.layer_dims);
        if self.weights.len() != expected {
            return Err(ModelError::Shape(format!(
                "dense weights have length {}, layer dims require {}",
                self.weights.len(),
                expected
            )));
        }
        Ok(())
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let layer = (off, off + fan_in * fan_out, fan_in, fan_out);
                off += (fan_in + 1) * fan_out;
                layer
            })
            .collect()
    }
}

pub fn validate_layer_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(ModelError::InvalidConfig(
            "need at least an input width and an output width".into(),
        ));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(ModelError::InvalidConfig("layer widths must be positive".into()));
    }
    if *layer_dims.last().unwrap() != 1 {
        return Err(ModelError::InvalidConfig("the output layer must have width 1".into()));
    }
    Ok(())
}

/// A labeled example. Features are kept sorted and unique.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Example {
    pub label: u8,
    pub features: Vec<ParamKey>,
}

impl Example {
    pub fn new(label: u8, mut features: Vec<ParamKey>) -> Result<Self> {
        if label > 1 {
            return Err(ModelError::InvalidLabel(label));
        }
        features.sort_unstable();
        features.dedup();
        if features.is_empty() {
            return Err(ModelError::EmptyFeatures);
        }
        Ok(Example { label, features })
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Batch {
    pub batch_id: u64,
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Gradients of the mean logistic loss over one set of examples.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct GradientUpdate {
    pub sparse: BTreeMap<ParamKey, Vec<f32>>,
    pub dense: Vec<f32>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_width: usize,
    pub layer_dims: Vec<usize>,
    pub lr: f32,
    pub seed: u64,
    pub init_range: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_width: 8,
            layer_dims: vec![8, 16, 1],
            lr: 0.05,
            seed: 1,
            init_range: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        validate_layer_dims(&self.layer_dims)?;
        if self.embedding_width == 0 || self.layer_dims[0] != self.embedding_width {
            return Err(ModelError::InvalidConfig(format!(
                "input layer width {} must equal embedding width {}",
                self.layer_dims[0], self.embedding_width
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ModelError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn init_dense(&self) -> Result<DenseParams> {
        DenseParams::init(&self.layer_dims, self.seed, self.init_range)
    }
}

/// Read access to embedding rows.
pub trait SparseView {
    fn embedding(&self, key: ParamKey) -> Option<&[f32]>;
}

impl SparseView for HashMap<ParamKey, SparseParam> {
    fn embedding(&self, key: ParamKey) -> Option<&[f32]> {
        self.get(&key).map(|p| p.embedding.as_slice())
    }
}

impl SparseView for BTreeMap<ParamKey, SparseParam> {
    fn embedding(&self, key: ParamKey) -> Option<&[f32]> {
        self.get(&key).map(|p| p.embedding.as_slice())
    }
}

impl SparseView for HashMap<ParamKey, Vec<f32>> {
    fn embedding(&self, key: ParamKey) -> Option<&[f32]> {
        self.get(&key).map(Vec::as_slice)
    }
}

impl SparseView for BTreeMap<ParamKey, Vec<f32>> {
    fn embedding(&self, key: ParamKey) -> Option<&[f32]> {
        self.get(&key).map(Vec::as_slice)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-layer inputs of one example; the last entry is the output logit.
fn activations(
    example: &Example,
    sparse: &impl SparseView,
    dense: &DenseParams,
    layers: &[(usize, usize, usize, usize)],
) -> Result<Vec<Vec<f64>>> {
    let width = dense.input_width();
    let mut input = vec![0.0f64; width];
    for &key in &example.features {
        let emb = sparse.embedding(key).ok_or(ModelError::MissingKey(key))?;
        if emb.len() != width {
            return Err(ModelError::Shape(format!(
                "embedding of {key} has width {}, expected {width}",
                emb.len()
            )));
        }
        for (acc, &v) in input.iter_mut().zip(emb) {
            *acc += f64::from(v);
        }
    }

    let w = &dense.weights;
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input);
    for (idx, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
        let h = acts.last().unwrap();
        let last = idx + 1 == layers.len();
        let out: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &w[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                let z = row
                    .iter()
                    .zip(h)
                    .fold(f64::from(w[b_off + o]), |acc, (&wi, &hi)| acc + f64::from(wi) * hi);
                if last {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("forward activation"));
        }
        acts.push(out);
    }
    Ok(acts)
}

/// Click probability for each example.
pub fn forward(
    examples: &[Example],
    sparse: &impl SparseView,
    dense: &DenseParams,
) -> Result<Vec<f64>> {
    dense.check()?;
    let layers = dense.layers();
    examples
        .iter()
        .map(|ex| {
            let acts = activations(ex, sparse, dense, &layers)?;
            Ok(sigmoid(acts.last().unwrap()[0]))
        })
        .collect()
}

/// Gradients of the mean logistic loss. `predictions` must come from
/// [`forward`] on the same inputs.
pub fn backward(
    examples: &[Example],
    sparse: &impl SparseView,
    dense: &DenseParams,
    predictions: &[f64],
) -> Result<GradientUpdate> {
    dense.check()?;
    if predictions.len() != examples.len() {
        return Err(ModelError::Shape(format!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    let layers = dense.layers();
    let width = dense.input_width();
    let mut dense_grad = vec![0.0f64; dense.weights.len()];
    let mut sparse_grad: BTreeMap<ParamKey, Vec<f64>> = BTreeMap::new();
    if examples.is_empty() {
        return Ok(GradientUpdate {
            sparse: BTreeMap::new(),
            dense: vec![0.0; dense.weights.len()],
        });
    }
    let scale = 1.0 / examples.len() as f64;
    let w = &dense.weights;

    for (ex, &p) in examples.iter().zip(predictions) {
        if !p.is_finite() {
            return Err(ModelError::NonFinite("prediction"));
        }
        let acts = activations(ex, sparse, dense, &layers)?;
        // d loss / d logit for the mean loss
        let mut delta = vec![(p - f64::from(ex.label)) * scale];
        for (idx, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let h = &acts[idx];
            let mut prev = vec![0.0f64; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                dense_grad[b_off + o] += d;
                let row = w_off + o * fan_in;
                for i in 0..fan_in {
                    dense_grad[row + i] += d * h[i];
                    prev[i] += f64::from(w[row + i]) * d;
                }
            }
            if idx > 0 {
                // tanh' = 1 - tanh^2
                for (g, &a) in prev.iter_mut().zip(h) {
                    *g *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        for &key in &ex.features {
            let acc = sparse_grad.entry(key).or_insert_with(|| vec![0.0; width]);
            for (a, &d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
    }

    let dense_out: Vec<f32> = dense_grad.iter().map(|&g| g as f32).collect();
    if dense_out.iter().any(|g| !g.is_finite()) {
        return Err(ModelError::NonFinite("dense gradient"));
    }
    let mut sparse_out = BTreeMap::new();
    for (key, g) in sparse_grad {
        let g: Vec<f32> = g.into_iter().map(|v| v as f32).collect();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("sparse gradient"));
        }
        sparse_out.insert(key, g);
    }
    Ok(GradientUpdate {
        sparse: sparse_out,
        dense: dense_out,
    })
}

/// Mean logistic loss with probabilities clamped away from 0 and 1.
pub fn log_loss(examples: &[Example], predictions: &[f64]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let total: f64 = examples
        .iter()
        .zip(predictions)
        .map(|(ex, &p)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            if ex.label == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / examples.len() as f64
}

/// The additive change SGD applies for gradient `g`: `-(lr * g)`.
pub fn sgd_delta(grad: &[f32], lr: f32) -> Vec<f32> {
    grad.iter().map(|&g| -(lr * g)).collect()
}

/// Parameters SGD can step.
pub trait Updatable {
    fn values_mut(&mut self) -> &mut [f32];
}

impl Updatable for SparseParam {
    fn values_mut(&mut self) -> &mut [f32] {
        &mut self.embedding
    }
}

impl Updatable for DenseParams {
    fn values_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }
}

/// Plain SGD step `w <- w - lr * g`. `opt_state` is left untouched.
pub fn apply_update<P: Updatable>(param: &mut P, grad: &[f32], lr: f32) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(ModelError::InvalidConfig("learning rate must be positive".into()));
    }
    let values = param.values_mut();
    if values.len() != grad.len() {
        return Err(ModelError::Shape(format!(
            "gradient length {} does not match parameter length {}",
            grad.len(),
            values.len()
        )));
    }
    let updated: Vec<f32> = values.iter().zip(grad).map(|(&w, &g)| w - lr * g).collect();
    if updated.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("updated parameter"));
    }
    values.copy_from_slice(&updated);
    Ok(())
}

/// Area under the ROC curve: probability that a random positive is scored
/// above a random negative, ties counting one half.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(ModelError::Shape(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ModelError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Final parameters of a run. Keys never trained read as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub dense: DenseParams,
    pub sparse: BTreeMap<ParamKey, SparseParam>,
    zero: Vec<f32>,
}

impl TrainedModel {
    pub fn new(dense: DenseParams, sparse: BTreeMap<ParamKey, SparseParam>) -> Self {
        let zero = vec![0.0; dense.input_width()];
        TrainedModel { dense, sparse, zero }
    }

    pub fn predict(&self, examples: &[Example]) -> Result<Vec<f64>> {
        forward(examples, self, &self.dense)
    }

    pub fn auc(&self, examples: &[Example]) -> Result<f64> {
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        auc(&labels, &self.predict(examples)?)
    }

    pub fn log_loss(&self, examples: &[Example]) -> Result<f64> {
        Ok(log_loss(examples, &self.predict(examples)?))
    }
}

impl SparseView for TrainedModel {
    fn embedding(&self, key: ParamKey) -> Option<&[f32]> {
        Some(self.sparse.get(&key).map_or(self.zero.as_slice(), |p| p.embedding.as_slice()))
    }
}
