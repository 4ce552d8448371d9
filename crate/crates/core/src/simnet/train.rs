//! Mini-batch training on labeled pairs, difficult-pair mining and the
//! mine-and-retrain refinement procedure.
//!
//! Each batch is split into fixed-size chunks whose gradients are computed
//! independently (possibly in parallel) and summed in chunk order before the
//! optimizer step, so results do not depend on the execution mode.

use std::collections::BTreeSet;

use rand::seq::{index::sample, SliceRandom};
use serde::{Deserialize, Serialize};

use super::loss::{pair_loss, pair_loss_grad, pair_target, PairLabel};
use super::model::{InputNorm, SimNetModel};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::nn::{sgd_step, ForwardCache, GradientSet, Network, OptimizerConfig, SgdState};
use crate::retrieval::{sample_balanced_pairs, Dataset, Pair, PairBatch};
use crate::rng::{derive, SimRng};

/// Pairs per independently computed gradient chunk.
pub(crate) const GRAD_CHUNK: usize = 25;

const STREAM_SPLIT: u64 = 1;
const STREAM_BASE_PAIRS: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_MINING: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Self { patience: 5, min_delta: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Margin added to / subtracted from the baseline similarity.
    pub margin: f64,
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    pub convergence: Convergence,
    /// Upper bound on the share of each batch taken by mined pairs.
    pub mined_fraction_cap: f64,
    /// Share of the pair set held out for the convergence check.
    pub val_fraction: f64,
    /// Balanced pairs drawn for the first phase of refinement training.
    pub base_pairs: usize,
    /// Images drawn per mining round; all ordered pairs among them are scored.
    pub mining_pool: usize,
    pub refinement_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.8,
            optimizer: OptimizerConfig::default(),
            max_epochs: 100,
            convergence: Convergence::default(),
            mined_fraction_cap: 0.5,
            val_fraction: 0.1,
            base_pairs: 20_000,
            mining_pool: 200,
            refinement_rounds: 1,
        }
    }
}

impl TrainConfig {
    /// Defaults for the network trained without refinement.
    pub fn simnet() -> Self {
        Self { margin: 0.2, refinement_rounds: 0, ..Self::default() }
    }

    /// Defaults for the network trained with difficult-pair refinement.
    pub fn simnet_star() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.convergence.patience == 0 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mined_fraction_cap) {
            return Err(Error::InvalidConfig(format!(
                "mined_fraction_cap must lie in [0, 1], got {}",
                self.mined_fraction_cap
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Training on balanced random pairs.
    Base,
    /// Retraining with mined difficult pairs mixed in.
    Refine,
    /// Validation-only record when a refinement round had nothing to add.
    Confirm,
    /// End-to-end phase 1: encoder fixed.
    Frozen,
    /// End-to-end phase 2: encoder and similarity network trained jointly.
    EndToEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub(crate) fn push(&mut self, phase: Phase, train_loss: f64, val_loss: f64) {
        let epoch = self.records.len() + 1;
        self.records.push(EpochRecord { epoch, phase, train_loss, val_loss });
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct phases in order of first appearance.
    pub fn phases(&self) -> Vec<Phase> {
        let mut out: Vec<Phase> = Vec::new();
        for r in &self.records {
            if out.last() != Some(&r.phase) {
                out.push(r.phase);
            }
        }
        out
    }

    pub fn last_val_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_loss)
    }

    pub fn extend(&mut self, other: TrainingLog) {
        for r in other.records {
            self.push(r.phase, r.train_loss, r.val_loss);
        }
    }

    /// One JSON object per line: `epoch`, `phase`, `train_loss`, `val_loss`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| Error::InvalidConfig(format!("bad training log line: {e}")))
            })
            .collect::<Result<Vec<EpochRecord>>>()?;
        Ok(Self { records })
    }
}

/// Where pair features come from: a dataset, normalized per the model.
pub(crate) struct PairSource<'a> {
    pub dataset: &'a Dataset,
    pub norm: InputNorm,
}

impl PairSource<'_> {
    fn inputs(&self, pairs: &[Pair], out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        for p in pairs {
            self.norm.push(self.dataset.row(p.i), out)?;
            self.norm.push(self.dataset.row(p.j), out)?;
        }
        Ok(())
    }
}

/// `sum |s - target|` over a batch of network inputs, and its gradient
/// scaled by `scale`.
pub(crate) fn l1_gradient(
    net: &Network,
    inputs: &[f64],
    targets: &[f64],
    scale: f64,
) -> Result<(GradientSet, f64)> {
    let mut cache = ForwardCache::default();
    net.forward_batch(inputs, targets.len(), &mut cache)?;
    let mut loss = 0.0;
    let upstream: Vec<f64> = cache
        .output()
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            loss += (s - t).abs();
            scale * pair_loss_grad(s, t, PairLabel::Similar, 0.0)
        })
        .collect();
    let mut grads = GradientSet::zeros_like(net);
    net.backprop_into(&cache, &upstream, &mut grads, None)?;
    Ok((grads, loss))
}

fn chunk_gradient(
    net: &Network,
    src: &PairSource,
    pairs: &[Pair],
    margin: f64,
    scale: f64,
) -> Result<(GradientSet, f64)> {
    let mut inputs = Vec::with_capacity(pairs.len() * net.input_dim());
    src.inputs(pairs, &mut inputs)?;
    let targets: Vec<f64> = pairs.iter().map(|p| pair_target(p.baseline_sim, p.label, margin)).collect();
    l1_gradient(net, &inputs, &targets, scale)
}

/// Sums chunk results in chunk order.
pub(crate) fn reduce_chunks(parts: Vec<Result<(GradientSet, f64)>>) -> Result<(GradientSet, f64)> {
    let mut parts = parts.into_iter();
    let (mut total, mut loss) = parts.next().expect("at least one chunk")?;
    for part in parts {
        let (g, l) = part?;
        total.add_assign(&g);
        loss += l;
    }
    Ok((total, loss))
}

/// Gradient of the mean loss over `batch`; returns (gradient, summed loss).
pub(crate) fn batch_gradient(
    net: &Network,
    src: &PairSource,
    batch: &[Pair],
    margin: f64,
    exec: Execution,
) -> Result<(GradientSet, f64)> {
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<&[Pair]> = batch.chunks(GRAD_CHUNK).collect();
    reduce_chunks(map_indexed(exec, chunks.len(), |c| chunk_gradient(net, src, chunks[c], margin, scale)))
}

pub(crate) fn pair_scores(
    net: &Network,
    src: &PairSource,
    pairs: &[Pair],
    exec: Execution,
) -> Result<Vec<f64>> {
    const EVAL_CHUNK: usize = 256;
    let chunks: Vec<&[Pair]> = pairs.chunks(EVAL_CHUNK).collect();
    let parts = map_indexed(exec, chunks.len(), |c| -> Result<Vec<f64>> {
        let mut inputs = Vec::new();
        src.inputs(chunks[c], &mut inputs)?;
        let mut cache = ForwardCache::default();
        net.forward_batch(&inputs, chunks[c].len(), &mut cache)?;
        Ok(cache.output().to_vec())
    });
    let mut out = Vec::with_capacity(pairs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn mean_loss_net(
    net: &Network,
    src: &PairSource,
    pairs: &[Pair],
    margin: f64,
    exec: Execution,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let scores = pair_scores(net, src, pairs, exec)?;
    let total: f64 =
        scores.iter().zip(pairs).map(|(&s, p)| pair_loss(s, p.baseline_sim, p.label, margin)).sum();
    Ok(total / pairs.len() as f64)
}

/// Mean pair loss of `model` over `pairs`.
pub fn mean_pair_loss(model: &SimNetModel, dataset: &Dataset, pairs: &PairBatch, margin: f64) -> Result<f64> {
    let src = PairSource { dataset, norm: model.input_norm() };
    mean_loss_net(model.network(), &src, &pairs.pairs, margin, Execution::default())
}

/// Pairs to train on in one phase. Mined pairs, if any, fill at most
/// `floor(cap * batch_size)` slots of every batch; base pairs fill the rest,
/// and one epoch is one pass over the base pairs.
pub(crate) struct PhasePlan<'a> {
    pub phase: Phase,
    pub base: &'a [Pair],
    pub mined: &'a [Pair],
    pub mined_cap: f64,
    pub val: &'a [Pair],
}

pub(crate) fn epoch_batches(plan: &PhasePlan, batch_size: usize, rng: &mut SimRng) -> Vec<Vec<Pair>> {
    let mut base = plan.base.to_vec();
    base.shuffle(rng);
    let mined_slots = if plan.mined.is_empty() {
        0
    } else {
        ((plan.mined_cap * batch_size as f64).floor() as usize).min(plan.mined.len()).min(batch_size - 1)
    };
    let mut mined = plan.mined.to_vec();
    if mined_slots > 0 {
        mined.shuffle(rng);
    }
    let base_slots = batch_size - mined_slots;
    let mut cursor = 0;
    base.chunks(base_slots)
        .map(|chunk| {
            let mut batch = chunk.to_vec();
            for _ in 0..mined_slots {
                batch.push(mined[cursor % mined.len()]);
                cursor += 1;
            }
            batch
        })
        .collect()
}

/// Runs epochs until the validation loss stops improving by more than
/// `min_delta` for `patience` epochs, or `max_epochs` is reached.
pub(crate) fn run_phase(
    net: &mut Network,
    src: &PairSource,
    plan: &PhasePlan,
    cfg: &TrainConfig,
    rng: &mut SimRng,
    log: &mut TrainingLog,
) -> Result<()> {
    if cfg.max_epochs == 0 {
        return Ok(());
    }
    let exec = cfg.optimizer.execution;
    let mut state = SgdState::new(net);
    let mut best = mean_loss_net(net, src, plan.val, cfg.margin, exec)?;
    let mut stale = 0;
    for _ in 0..cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in epoch_batches(plan, cfg.optimizer.batch_size, rng) {
            let (grads, loss) = batch_gradient(net, src, &batch, cfg.margin, exec)?;
            sgd_step(net, &grads, &mut state, &cfg.optimizer)?;
            loss_sum += loss;
            count += batch.len();
        }
        let val = mean_loss_net(net, src, plan.val, cfg.margin, exec)?;
        log.push(plan.phase, loss_sum / count as f64, val);
        log::debug!(
            "{:?} epoch {}: train {:.5} val {val:.5}",
            plan.phase,
            log.records.len(),
            loss_sum / count as f64
        );
        if val < best - cfg.convergence.min_delta {
            best = val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.convergence.patience {
                break;
            }
        }
    }
    Ok(())
}

/// Shuffles a copy of `pairs` and holds out `val_fraction` of it. With too
/// few pairs to hold any out, validation uses the training pairs.
pub(crate) fn split_pairs(pairs: &[Pair], val_fraction: f64, seed: u64) -> (Vec<Pair>, Vec<Pair>) {
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut derive(seed, STREAM_SPLIT));
    let n_val = (val_fraction * pairs.len() as f64).round() as usize;
    if n_val == 0 || n_val >= pairs.len() {
        return (shuffled.clone(), shuffled);
    }
    let val = shuffled.split_off(pairs.len() - n_val);
    (shuffled, val)
}

fn check_trainable(dataset: &Dataset, pairs: &PairBatch) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let classes: BTreeSet<i32> = dataset.labels()?.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Dataset("all items share one class; there are no dissimilar pairs".into()));
    }
    if let Some(p) = pairs.pairs.iter().find(|p| p.i >= dataset.len() || p.j >= dataset.len()) {
        return Err(Error::Dataset(format!(
            "pair ({}, {}) out of range for {} items",
            p.i,
            p.j,
            dataset.len()
        )));
    }
    Ok(())
}

pub(crate) fn train_pair_network(
    net: &mut Network,
    norm: InputNorm,
    dataset: &Dataset,
    pairs: &PairBatch,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    check_trainable(dataset, pairs)?;
    let src = PairSource { dataset, norm };
    let (train, val) = split_pairs(&pairs.pairs, cfg.val_fraction, cfg.optimizer.seed);
    let mut rng = derive(cfg.optimizer.seed, STREAM_SHUFFLE);
    let mut log = TrainingLog::default();
    let plan = PhasePlan { phase: Phase::Base, base: &train, mined: &[], mined_cap: 0.0, val: &val };
    run_phase(net, &src, &plan, cfg, &mut rng, &mut log)?;
    Ok(log)
}

/// Trains on `pairs` by mini-batch SGD until convergence.
pub fn train(
    model: &mut SimNetModel,
    dataset: &Dataset,
    pairs: &PairBatch,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    check_dims(model, dataset)?;
    let norm = model.input_norm();
    train_pair_network(model.network_mut(), norm, dataset, pairs, cfg)
}

fn check_dims(model: &SimNetModel, dataset: &Dataset) -> Result<()> {
    if model.dim() != dataset.dim() {
        return Err(Error::dims("model vs dataset feature dim", model.dim(), dataset.dim()));
    }
    Ok(())
}

/// True when the network does worse than the baseline similarity: a lower
/// score on a match, or a higher score on a non-match.
pub fn is_difficult(label: PairLabel, score: f64, baseline_sim: f64) -> bool {
    match label {
        PairLabel::Similar => score < baseline_sim,
        PairLabel::Dissimilar => score > baseline_sim,
    }
}

/// Draws `candidate_pool_size` non-query images, scores every ordered pair
/// among them and returns the difficult ones.
pub fn mine_difficult_pairs(
    model: &SimNetModel,
    dataset: &Dataset,
    candidate_pool_size: usize,
    seed: u64,
) -> Result<PairBatch> {
    mine_difficult_pairs_with(model, dataset, candidate_pool_size, seed, Execution::default())
}

pub fn mine_difficult_pairs_with(
    model: &SimNetModel,
    dataset: &Dataset,
    candidate_pool_size: usize,
    seed: u64,
    exec: Execution,
) -> Result<PairBatch> {
    if candidate_pool_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "candidate pool needs at least 2 images, got {candidate_pool_size}"
        )));
    }
    check_dims(model, dataset)?;
    let pool = mining_pool(dataset, candidate_pool_size, seed);
    let candidates = candidate_pairs(dataset, &pool)?;
    let src = PairSource { dataset, norm: model.input_norm() };
    let scores = pair_scores(model.network(), &src, &candidates, exec)?;
    Ok(PairBatch::new(
        candidates
            .into_iter()
            .zip(scores)
            .filter(|(p, s)| is_difficult(p.label, *s, p.baseline_sim))
            .map(|(p, _)| p)
            .collect(),
    ))
}

/// The random image set a mining round draws from, in ascending index order.
pub fn mining_pool(dataset: &Dataset, candidate_pool_size: usize, seed: u64) -> Vec<usize> {
    let eligible = dataset.training_indices();
    let n = candidate_pool_size.min(eligible.len());
    let mut picked: Vec<usize> = sample(&mut derive(seed, STREAM_MINING), eligible.len(), n)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    picked.sort_unstable();
    picked
}

fn candidate_pairs(dataset: &Dataset, pool: &[usize]) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(pool.len() * pool.len().saturating_sub(1));
    for &i in pool {
        for &j in pool {
            if i != j {
                out.push(Pair::from_dataset(dataset, i, j)?);
            }
        }
    }
    Ok(out)
}

/// Balanced training to convergence, then for each refinement round: mine
/// difficult pairs from a fresh image set, add them to the pool (capped per
/// batch) and retrain to convergence.
///
/// A round that mines nothing, or a zero cap, logs a single validation-only
/// `Confirm` record and leaves the model untouched.
pub fn train_with_refinement(
    model: &mut SimNetModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    check_dims(model, dataset)?;
    let seed = cfg.optimizer.seed;
    let pairs = sample_balanced_pairs(dataset, cfg.base_pairs, derive_seed(seed, STREAM_BASE_PAIRS))?;
    check_trainable(dataset, &pairs)?;
    let (train, val) = split_pairs(&pairs.pairs, cfg.val_fraction, seed);
    let src = PairSource { dataset, norm: model.input_norm() };
    let mut rng = derive(seed, STREAM_SHUFFLE);
    let mut log = TrainingLog::default();
    let base_plan = PhasePlan { phase: Phase::Base, base: &train, mined: &[], mined_cap: 0.0, val: &val };
    run_phase(model.network_mut(), &src, &base_plan, cfg, &mut rng, &mut log)?;
    if cfg.max_epochs == 0 {
        return Ok(log);
    }

    let mut mined_all: Vec<Pair> = Vec::new();
    for round in 0..cfg.refinement_rounds {
        let mined = mine_difficult_pairs_with(
            model,
            dataset,
            cfg.mining_pool,
            derive_seed(seed, 100 + round as u64),
            cfg.optimizer.execution,
        )?;
        log::info!("refinement round {round}: {} difficult pairs", mined.len());
        if mined.is_empty() || cfg.mined_fraction_cap == 0.0 {
            let train_loss =
                mean_loss_net(model.network(), &src, &train, cfg.margin, cfg.optimizer.execution)?;
            let val_loss = mean_loss_net(model.network(), &src, &val, cfg.margin, cfg.optimizer.execution)?;
            log.push(Phase::Confirm, train_loss, val_loss);
            continue;
        }
        mined_all.extend(mined.pairs);
        let plan = PhasePlan {
            phase: Phase::Refine,
            base: &train,
            mined: &mined_all,
            mined_cap: cfg.mined_fraction_cap,
            val: &val,
        };
        run_phase(model.network_mut(), &src, &plan, cfg, &mut rng, &mut log)?;
    }
    Ok(log)
}

/// Deterministic per-task seed derived from a base seed.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    derive(seed, stream).next_u64()
}
