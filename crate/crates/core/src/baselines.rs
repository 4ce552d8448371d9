//! Reference similarities: cosine, negated Euclidean distance, and a trained
//! affine map over the concatenated pair.

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, Network};
use crate::retrieval::{Dataset, PairBatch, Scorer};
use crate::simnet::{train_pair_network, InputNorm, TrainConfig, TrainingLog};

/// `a.b / (|a| |b|)`, clamped to [-1, 1]. Undefined for zero vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine_similarity", a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NonFinite("cosine similarity of a zero vector".into()));
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    if c.is_nan() {
        return Err(Error::NonFinite("cosine similarity of non-finite input".into()));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// `-|a - b|`, so that higher means more similar.
pub fn neg_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("neg_euclidean", a.len(), b.len()));
    }
    Ok(-a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CosineScorer;

impl Scorer for CosineScorer {
    fn name(&self) -> String {
        "cosine".into()
    }

    fn score(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        cosine_similarity(query, item)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EuclideanScorer;

impl Scorer for EuclideanScorer {
    fn name(&self) -> String {
        "euclid".into()
    }

    fn score(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        neg_euclidean(query, item)
    }
}

/// `w . concat(x_i, x_j) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    weights: Vec<f64>,
    bias: f64,
}

impl LinearModel {
    /// All-zero model for vectors of length `k`.
    pub fn zeros(k: usize) -> Self {
        Self { weights: vec![0.0; 2 * k], bias: 0.0 }
    }

    pub fn from_parts(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.is_empty() || !weights.len().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "linear weights must have even positive length, got {}",
                weights.len()
            )));
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("linear model parameters".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Length of each of the two input vectors.
    pub fn dim(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn score(&self, x_i: &[f64], x_j: &[f64]) -> Result<f64> {
        linear_score(self, x_i, x_j)
    }

    pub(crate) fn to_network(&self) -> Network {
        let layer = DenseLayer::from_parts(
            self.weights.len(),
            1,
            self.weights.clone(),
            vec![self.bias],
            Activation::Identity,
        )
        .expect("valid single-layer shape");
        Network::new(vec![layer]).expect("single identity layer")
    }

    pub(crate) fn from_network(net: &Network) -> Result<Self> {
        match net.layers() {
            [l] if l.out_dim() == 1 => Self::from_parts(l.weights().to_vec(), l.bias()[0]),
            _ => Err(Error::InvalidConfig("linear model needs a single layer with one output".into())),
        }
    }
}

pub fn linear_score(model: &LinearModel, x_i: &[f64], x_j: &[f64]) -> Result<f64> {
    let k = model.dim();
    if x_i.len() + x_j.len() != 2 * k {
        return Err(Error::dims("linear_score input", 2 * k, x_i.len() + x_j.len()));
    }
    let (wi, wj) = model.weights.split_at(x_i.len());
    let dot = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    Ok(dot(wi, x_i) + dot(wj, x_j) + model.bias)
}

impl Scorer for LinearModel {
    fn name(&self) -> String {
        "linear".into()
    }

    fn score(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        linear_score(self, query, item)
    }
}

/// Fits a [`LinearModel`] with the same margin loss and optimizer as the
/// similarity network. Starts from all-zero parameters.
pub fn train_linear(
    dataset: &Dataset,
    pairs: &PairBatch,
    cfg: &TrainConfig,
) -> Result<(LinearModel, TrainingLog)> {
    let mut net = LinearModel::zeros(dataset.dim()).to_network();
    let log = train_pair_network(&mut net, InputNorm::None, dataset, pairs, cfg)?;
    Ok((LinearModel::from_network(&net)?, log))
}
