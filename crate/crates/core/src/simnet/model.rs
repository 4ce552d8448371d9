use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardCache, Network};
use crate::retrieval::Scorer;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchPreset {
    A,
    B,
    C,
    D,
    Custom,
}

impl ArchPreset {
    /// Hidden widths of the named presets; `None` for `Custom`.
    pub fn hidden_dims(self) -> Option<&'static [usize]> {
        match self {
            ArchPreset::A => Some(&[1024, 1024]),
            ArchPreset::B => Some(&[4096, 4096]),
            ArchPreset::C => Some(&[8192, 8192]),
            ArchPreset::D => Some(&[4096, 4096, 4096]),
            ArchPreset::Custom => None,
        }
    }
}

impl std::str::FromStr for ArchPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(ArchPreset::A),
            "B" => Ok(ArchPreset::B),
            "C" => Ok(ArchPreset::C),
            "D" => Ok(ArchPreset::D),
            "CUSTOM" => Ok(ArchPreset::Custom),
            _ => Err(Error::InvalidConfig(format!("unknown architecture '{s}'"))),
        }
    }
}

/// Hidden layer widths plus the per-vector input size `K`. The network sees
/// `2K` inputs and ends in a single linear output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: ArchPreset,
    pub hidden_dims: Vec<usize>,
    pub input_dim_per_vector: usize,
    pub width_scale: f64,
}

impl ArchConfig {
    pub fn preset(name: ArchPreset, k: usize) -> Result<Self> {
        let hidden = name
            .hidden_dims()
            .ok_or_else(|| Error::InvalidConfig("Custom architecture needs explicit hidden dims".into()))?;
        Ok(Self { name, hidden_dims: hidden.to_vec(), input_dim_per_vector: k, width_scale: 1.0 })
    }

    pub fn custom(hidden_dims: Vec<usize>, k: usize) -> Self {
        Self { name: ArchPreset::Custom, hidden_dims, input_dim_per_vector: k, width_scale: 1.0 }
    }

    pub fn with_scale(mut self, width_scale: f64) -> Self {
        self.width_scale = width_scale;
        self
    }

    /// Hidden widths after scaling, each rounded to the nearest multiple of 8
    /// (at least 8). Unscaled configs are used verbatim.
    pub fn effective_hidden(&self) -> Vec<usize> {
        if self.width_scale == 1.0 {
            return self.hidden_dims.clone();
        }
        self.hidden_dims
            .iter()
            .map(|&h| {
                let scaled = h as f64 * self.width_scale;
                ((scaled / 8.0).round() as usize * 8).max(8)
            })
            .collect()
    }

    /// `[2K, hidden.., 1]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![2 * self.input_dim_per_vector];
        dims.extend(self.effective_hidden());
        dims.push(1);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim_per_vector == 0 {
            return Err(Error::InvalidConfig("feature dimension K must be >= 1".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("hidden dims must be positive".into()));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InputNorm {
    #[default]
    L2NormalizeEach,
    None,
}

impl InputNorm {
    /// Appends the (possibly normalized) vector to `out`.
    pub(crate) fn push(self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input feature vector".into()));
        }
        match self {
            InputNorm::None => out.extend_from_slice(x),
            InputNorm::L2NormalizeEach => {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::NonFinite("cannot normalize a zero vector".into()));
                }
                out.extend(x.iter().map(|v| v / n));
            }
        }
        Ok(())
    }
}

/// The learned pairwise similarity `s = g(norm(x_i), norm(x_j))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimNetModel {
    arch: ArchConfig,
    net: Network,
    input_norm: InputNorm,
}

/// Randomly initializes a model for `arch`; deterministic given the seed.
pub fn build_model(arch: ArchConfig, seed: u64) -> Result<SimNetModel> {
    arch.validate()?;
    let net = Network::init(&arch.layer_dims(), &mut seeded(seed))?;
    Ok(SimNetModel { arch, net, input_norm: InputNorm::L2NormalizeEach })
}

/// Scores processed per forward call when ranking a gallery.
const SCORE_CHUNK: usize = 256;

impl SimNetModel {
    pub fn from_parts(arch: ArchConfig, net: Network, input_norm: InputNorm) -> Result<Self> {
        arch.validate()?;
        if net.dims() != arch.layer_dims() {
            return Err(Error::InvalidConfig(format!(
                "network dims {:?} do not match architecture {:?}",
                net.dims(),
                arch.layer_dims()
            )));
        }
        Ok(Self { arch, net, input_norm })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn input_norm(&self) -> InputNorm {
        self.input_norm
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) {
        self.input_norm = norm;
    }

    /// Per-vector input size `K`.
    pub fn dim(&self) -> usize {
        self.arch.input_dim_per_vector
    }

    /// The network input for a pair: `concat(norm(x_i), norm(x_j))`.
    pub fn pair_input(&self, x_i: &[f64], x_j: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * self.dim());
        self.push_pair_input(x_i, x_j, &mut out)?;
        Ok(out)
    }

    pub(crate) fn push_pair_input(&self, x_i: &[f64], x_j: &[f64], out: &mut Vec<f64>) -> Result<()> {
        let k = self.dim();
        if x_i.len() != k {
            return Err(Error::dims("score_pair first vector", k, x_i.len()));
        }
        if x_j.len() != k {
            return Err(Error::dims("score_pair second vector", k, x_j.len()));
        }
        self.input_norm.push(x_i, out)?;
        self.input_norm.push(x_j, out)
    }

    pub fn score_pair(&self, x_i: &[f64], x_j: &[f64]) -> Result<f64> {
        let (out, _) = self.net.forward(&self.pair_input(x_i, x_j)?)?;
        Ok(out[0])
    }
}

/// Free-function form of [`SimNetModel::score_pair`].
pub fn score_pair(model: &SimNetModel, x_i: &[f64], x_j: &[f64]) -> Result<f64> {
    model.score_pair(x_i, x_j)
}

impl Scorer for SimNetModel {
    fn name(&self) -> String {
        "simnet".into()
    }

    fn score(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        self.score_pair(query, item)
    }

    fn score_many(&self, query: &[f64], items: &[&[f64]]) -> std::result::Result<Vec<f64>, (usize, Error)> {
        let mut scores = Vec::with_capacity(items.len());
        let mut cache = ForwardCache::default();
        let mut inputs = Vec::new();
        for (c, chunk) in items.chunks(SCORE_CHUNK).enumerate() {
            inputs.clear();
            for (k, item) in chunk.iter().enumerate() {
                self.push_pair_input(query, item, &mut inputs).map_err(|e| (c * SCORE_CHUNK + k, e))?;
            }
            self.net.forward_batch(&inputs, chunk.len(), &mut cache).map_err(|e| (c * SCORE_CHUNK, e))?;
            scores.extend_from_slice(cache.output());
        }
        Ok(scores)
    }
}
