//! Joint training of a feature encoder and the similarity network.
//!
//! Phase 1 trains the similarity network on features from a fixed encoder.
//! Phase 2 backpropagates the pair loss through the similarity network, the
//! input normalization and the encoder, and updates both.

use serde::{Deserialize, Serialize};

use super::loss::{pair_loss, pair_loss_grad, pair_target};
use super::model::{InputNorm, SimNetModel};
use super::train::{
    run_phase, split_pairs, PairSource, Phase, PhasePlan, TrainConfig, TrainingLog, GRAD_CHUNK,
};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::nn::{sgd_step, ForwardCache, GradientSet, Network, SgdState};
use crate::retrieval::{sample_balanced_pairs, Dataset, Pair, Scorer};
use crate::rng::{derive, seeded};

const STREAM_PAIRS: u64 = 20;
const STREAM_SHUFFLE: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndConfig {
    /// Phase 1: similarity network only. Its `base_pairs` and `val_fraction`
    /// also define the pairs used in phase 2.
    pub frozen: TrainConfig,
    /// Phase 2: encoder and similarity network together. The margin of
    /// phase 1 is reused.
    pub joint: TrainConfig,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        let frozen = TrainConfig { refinement_rounds: 0, ..TrainConfig::default() };
        let mut joint = frozen.clone();
        joint.optimizer.learning_rate = frozen.optimizer.learning_rate / 10.0;
        Self { frozen, joint }
    }
}

/// A ReLU encoder `raw_dim -> hidden -> k` with a linear output layer.
pub fn build_encoder(raw_dim: usize, hidden: usize, k: usize, seed: u64) -> Result<Network> {
    Network::init(&[raw_dim, hidden, k], &mut seeded(seed))
}

/// Encodes every row of `raw` with `encoder`.
pub fn encode_dataset(encoder: &Network, raw: &Dataset) -> Result<Dataset> {
    if encoder.input_dim() != raw.dim() {
        return Err(Error::dims("encoder input vs raw dim", encoder.input_dim(), raw.dim()));
    }
    let mut cache = ForwardCache::default();
    encoder.forward_batch(raw.features(), raw.len(), &mut cache)?;
    raw.with_features(encoder.output_dim(), cache.output().to_vec())
}

/// Scores raw inputs by encoding them first.
#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndModel {
    pub encoder: Network,
    pub model: SimNetModel,
}

impl EndToEndModel {
    pub fn new(encoder: Network, model: SimNetModel) -> Result<Self> {
        if encoder.output_dim() != model.dim() {
            return Err(Error::dims("encoder output vs model K", model.dim(), encoder.output_dim()));
        }
        Ok(Self { encoder, model })
    }

    pub fn raw_dim(&self) -> usize {
        self.encoder.input_dim()
    }
}

impl Scorer for EndToEndModel {
    fn name(&self) -> String {
        "simnet+encoder".into()
    }

    fn score(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        let (q, _) = self.encoder.forward(query)?;
        let (x, _) = self.encoder.forward(item)?;
        self.model.score_pair(&q, &x)
    }
}

fn check_dims(encoder: &Network, model: &SimNetModel, raw: &Dataset) -> Result<()> {
    if encoder.input_dim() != raw.dim() {
        return Err(Error::dims("encoder input vs raw dim", encoder.input_dim(), raw.dim()));
    }
    if encoder.output_dim() != model.dim() {
        return Err(Error::dims("encoder output vs model K", model.dim(), encoder.output_dim()));
    }
    Ok(())
}

/// Loss and gradients of one chunk of pairs with respect to both networks.
struct JointGrad {
    encoder: GradientSet,
    simnet: GradientSet,
    loss: f64,
}

/// Sum of `|s - target|` over `pairs` and its gradient times `scale` for
/// encoder and similarity network. The baseline similarity inside the target
/// is the cosine of the current encoded features, held constant.
fn joint_chunk(
    encoder: &Network,
    model: &SimNetModel,
    raw: &Dataset,
    pairs: &[Pair],
    margin: f64,
    scale: f64,
) -> Result<JointGrad> {
    let k = model.dim();
    let n = pairs.len();
    let mut raw_in = Vec::with_capacity(2 * n * raw.dim());
    for p in pairs {
        raw_in.extend_from_slice(raw.row(p.i));
        raw_in.extend_from_slice(raw.row(p.j));
    }
    let mut enc_cache = ForwardCache::default();
    encoder.forward_batch(&raw_in, 2 * n, &mut enc_cache)?;
    let encoded = enc_cache.output();

    // Rows 2p and 2p + 1 are the two halves of pair p's network input.
    let normalize = model.input_norm() == InputNorm::L2NormalizeEach;
    let mut features = Vec::with_capacity(2 * n * k);
    let mut norms = Vec::with_capacity(2 * n);
    for row in encoded.chunks(k) {
        let norm = if normalize { row.iter().map(|v| v * v).sum::<f64>().sqrt() } else { 1.0 };
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NonFinite("encoder produced a zero or non-finite feature".into()));
        }
        norms.push(norm);
        features.extend(row.iter().map(|v| v / norm));
    }

    let net = model.network();
    let mut sim_cache = ForwardCache::default();
    net.forward_batch(&features, n, &mut sim_cache)?;
    let mut loss = 0.0;
    let upstream: Vec<f64> = sim_cache
        .output()
        .iter()
        .zip(pairs)
        .zip(features.chunks(2 * k))
        .map(|((&s, p), x)| {
            let (a, b) = x.split_at(k);
            let cos = cosine_of(a, b, normalize);
            let t = pair_target(cos, p.label, margin);
            loss += (s - t).abs();
            scale * pair_loss_grad(s, t, super::loss::PairLabel::Similar, 0.0)
        })
        .collect();
    let mut simnet = GradientSet::zeros_like(net);
    let mut d_features = Vec::new();
    net.backprop_into(&sim_cache, &upstream, &mut simnet, Some(&mut d_features))?;

    // Through u = e / |e|: de = (du - u (u . du)) / |e|.
    let mut d_encoded = d_features;
    if normalize {
        for ((du, u), norm) in d_encoded.chunks_mut(k).zip(features.chunks(k)).zip(&norms) {
            let proj: f64 = du.iter().zip(u).map(|(a, b)| a * b).sum();
            for (d, &u) in du.iter_mut().zip(u) {
                *d = (*d - u * proj) / norm;
            }
        }
    }
    let mut enc_grads = GradientSet::zeros_like(encoder);
    encoder.backprop_into(&enc_cache, &d_encoded, &mut enc_grads, None)?;
    Ok(JointGrad { encoder: enc_grads, simnet, loss })
}

fn cosine_of(a: &[f64], b: &[f64], unit: bool) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    if unit {
        dot
    } else {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

/// Mean joint loss over `pairs`, with targets from the current encoder.
pub(crate) fn joint_loss(
    encoder: &Network,
    model: &SimNetModel,
    raw: &Dataset,
    pairs: &[Pair],
    margin: f64,
    exec: Execution,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let encoded = encode_dataset(encoder, raw)?;
    let src = PairSource { dataset: &encoded, norm: model.input_norm() };
    let rebased = rebase(&encoded, pairs)?;
    let scores = super::train::pair_scores(model.network(), &src, &rebased, exec)?;
    let total: f64 =
        scores.iter().zip(&rebased).map(|(&s, p)| pair_loss(s, p.baseline_sim, p.label, margin)).sum();
    Ok(total / pairs.len() as f64)
}

/// The same index pairs with baseline similarity taken from `dataset`.
fn rebase(dataset: &Dataset, pairs: &[Pair]) -> Result<Vec<Pair>> {
    pairs.iter().map(|p| Pair::from_dataset(dataset, p.i, p.j)).collect()
}

/// Gradient of the mean joint loss over `batch`.
fn joint_gradient(
    encoder: &Network,
    model: &SimNetModel,
    raw: &Dataset,
    batch: &[Pair],
    margin: f64,
    exec: Execution,
) -> Result<(GradientSet, GradientSet, f64)> {
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<&[Pair]> = batch.chunks(GRAD_CHUNK).collect();
    let parts =
        map_indexed(exec, chunks.len(), |c| joint_chunk(encoder, model, raw, chunks[c], margin, scale));
    let mut enc = GradientSet::zeros_like(encoder);
    let mut sim = GradientSet::zeros_like(model.network());
    let mut loss = 0.0;
    for part in parts {
        let part = part?;
        enc.add_assign(&part.encoder);
        sim.add_assign(&part.simnet);
        loss += part.loss;
    }
    Ok((enc, sim, loss))
}

/// Phase 1 then phase 2 on balanced pairs drawn from the non-query items of
/// `raw`. Both networks are updated in place.
pub fn train_end_to_end(
    encoder: &mut Network,
    model: &mut SimNetModel,
    raw: &Dataset,
    cfg: &EndToEndConfig,
) -> Result<TrainingLog> {
    cfg.frozen.validate()?;
    cfg.joint.validate()?;
    check_dims(encoder, model, raw)?;
    let seed = cfg.frozen.optimizer.seed;
    let margin = cfg.frozen.margin;
    let pairs = sample_balanced_pairs(raw, cfg.frozen.base_pairs, derive_seed(seed))?;
    let (train, val) = split_pairs(&pairs.pairs, cfg.frozen.val_fraction, seed);
    let mut rng = derive(seed, STREAM_SHUFFLE);
    let mut log = TrainingLog::default();

    let encoded = encode_dataset(encoder, raw)?;
    let (train1, val1) = (rebase(&encoded, &train)?, rebase(&encoded, &val)?);
    let src = PairSource { dataset: &encoded, norm: model.input_norm() };
    let plan = PhasePlan { phase: Phase::Frozen, base: &train1, mined: &[], mined_cap: 0.0, val: &val1 };
    run_phase(model.network_mut(), &src, &plan, &cfg.frozen, &mut rng, &mut log)?;

    let jc = &cfg.joint;
    if jc.max_epochs == 0 {
        return Ok(log);
    }
    let exec = jc.optimizer.execution;
    let mut enc_state = SgdState::new(encoder);
    let mut sim_state = SgdState::new(model.network());
    let mut best = joint_loss(encoder, model, raw, &val, margin, exec)?;
    let mut stale = 0;
    let plan = PhasePlan { phase: Phase::EndToEnd, base: &train, mined: &[], mined_cap: 0.0, val: &val };
    for _ in 0..jc.max_epochs {
        let mut loss_sum = 0.0;
        let mut count = 0;
        for batch in super::train::epoch_batches(&plan, jc.optimizer.batch_size, &mut rng) {
            let (g_enc, g_sim, loss) = joint_gradient(encoder, model, raw, &batch, margin, exec)?;
            sgd_step(encoder, &g_enc, &mut enc_state, &jc.optimizer)?;
            sgd_step(model.network_mut(), &g_sim, &mut sim_state, &jc.optimizer)?;
            loss_sum += loss;
            count += batch.len();
        }
        let val_loss = joint_loss(encoder, model, raw, &val, margin, exec)?;
        log.push(Phase::EndToEnd, loss_sum / count as f64, val_loss);
        if val_loss < best - jc.convergence.min_delta {
            best = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= jc.convergence.patience {
                break;
            }
        }
    }
    Ok(log)
}

fn derive_seed(seed: u64) -> u64 {
    super::train::derive_seed(seed, STREAM_PAIRS)
}
