//! Pre-training on random unit-vector pairs with zero margin, so the network
//! starts out imitating cosine similarity.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::SimNetModel;
use super::train::{l1_gradient, reduce_chunks, GRAD_CHUNK};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::nn::{sgd_step, ForwardCache, OptimizerConfig, SgdState};
use crate::rng::{derive, SimRng};

const STREAM_TRAIN: u64 = 10;
const STREAM_VAL: u64 = 11;

/// Abort once validation MSE exceeds this multiple of its initial value.
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the base rate to zero over the run.
    #[default]
    LinearDecay,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::LinearDecay => base * (1.0 - step as f64 / total_steps.max(1) as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    /// Validation checks (for divergence) per run.
    pub checkpoints: usize,
}

impl Default for WarmupConfig {
    /// The supervised default rate of 0.001 barely moves the regression
    /// within a few million pairs; 0.1 with linear decay does.
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig { learning_rate: 0.1, ..OptimizerConfig::default() },
            schedule: LrSchedule::LinearDecay,
            checkpoints: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    /// Held-out mean squared error against cosine.
    pub mse: f64,
    /// Pearson correlation between scores and cosine on the held-out pairs.
    pub correlation_rho: f64,
    pub initial_mse: f64,
    pub pairs_trained: usize,
    pub pairs_validated: usize,
}

/// Unit vector with i.i.d. standard normal components before normalization.
pub fn random_unit_vector(rng: &mut SimRng, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `count` random pairs as concatenated network inputs, with their cosines.
fn random_pairs(model: &SimNetModel, rng: &mut SimRng, count: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = model.dim();
    let mut inputs = Vec::with_capacity(count * 2 * k);
    let mut cosines = Vec::with_capacity(count);
    for _ in 0..count {
        let a = random_unit_vector(rng, k);
        let b = random_unit_vector(rng, k);
        let start = inputs.len();
        model.push_pair_input(&a, &b, &mut inputs)?;
        let (x, y) = inputs[start..].split_at(k);
        cosines.push(x.iter().zip(y).map(|(p, q)| p * q).sum());
    }
    Ok((inputs, cosines))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

struct Validation {
    inputs: Vec<f64>,
    cosines: Vec<f64>,
}

impl Validation {
    fn evaluate(&self, model: &SimNetModel) -> Result<(f64, f64)> {
        let mut cache = ForwardCache::default();
        model.network().forward_batch(&self.inputs, self.cosines.len(), &mut cache)?;
        let out = cache.output();
        let mse =
            out.iter().zip(&self.cosines).map(|(s, c)| (s - c) * (s - c)).sum::<f64>() / out.len() as f64;
        Ok((mse, pearson(out, &self.cosines)))
    }
}

/// Trains `model` on `n_train_pairs` random unit-vector pairs to reproduce
/// their cosine, then reports on `n_val_pairs` held-out pairs. Training pairs
/// are drawn fresh for every batch.
pub fn warmup(
    model: &mut SimNetModel,
    n_train_pairs: usize,
    n_val_pairs: usize,
    cfg: &WarmupConfig,
) -> Result<WarmupReport> {
    cfg.optimizer.validate()?;
    if n_val_pairs < 2 {
        return Err(Error::InvalidConfig(format!(
            "warm-up needs at least 2 validation pairs, got {n_val_pairs}"
        )));
    }
    let seed = cfg.optimizer.seed;
    let exec = cfg.optimizer.execution;
    let (inputs, cosines) = random_pairs(model, &mut derive(seed, STREAM_VAL), n_val_pairs)?;
    let val = Validation { inputs, cosines };
    let (initial_mse, initial_rho) = val.evaluate(model)?;
    log::info!("warm-up start: mse {initial_mse:.5} rho {initial_rho:.4}");

    let batch_size = cfg.optimizer.batch_size;
    let total_steps = n_train_pairs.div_ceil(batch_size);
    let check_every = total_steps.div_ceil(cfg.checkpoints.max(1)).max(1);
    let mut rng = derive(seed, STREAM_TRAIN);
    let mut state = SgdState::new(model.network());
    let mut step_cfg = cfg.optimizer;
    let mut trained = 0;
    for step in 0..total_steps {
        let count = batch_size.min(n_train_pairs - trained);
        let (inputs, targets) = random_pairs(model, &mut rng, count)?;
        let row = inputs.len() / count;
        let scale = 1.0 / count as f64;
        let net = model.network();
        let n_chunks = count.div_ceil(GRAD_CHUNK);
        let (grads, _) = reduce_chunks(map_indexed(exec, n_chunks, |c| {
            let lo = c * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(count);
            l1_gradient(net, &inputs[lo * row..hi * row], &targets[lo..hi], scale)
        }))?;
        step_cfg.learning_rate = cfg.schedule.rate(cfg.optimizer.learning_rate, step, total_steps);
        sgd_step(model.network_mut(), &grads, &mut state, &step_cfg)
            .map_err(|e| Error::Diverged(format!("warm-up step {step}: {e}")))?;
        trained += count;
        if (step + 1) % check_every == 0 || step + 1 == total_steps {
            let (mse, rho) = val.evaluate(model)?;
            log::info!("warm-up {trained} pairs: mse {mse:.5} rho {rho:.4}");
            if !mse.is_finite() || mse > DIVERGENCE_FACTOR * initial_mse {
                return Err(Error::Diverged(format!(
                    "warm-up validation MSE {mse} after {trained} pairs exceeds {DIVERGENCE_FACTOR}x the initial {initial_mse}; lower the learning rate"
                )));
            }
        }
    }
    let (mse, correlation_rho) = val.evaluate(model)?;
    Ok(WarmupReport {
        mse,
        correlation_rho,
        initial_mse,
        pairs_trained: trained,
        pairs_validated: n_val_pairs,
    })
}
