//! Model checkpoints.
//!
//! ```text
//! "SIMC" | version u32 | kind u8 | meta_len u32 | meta (JSON, meta_len bytes)
//! param_count u64 | param_count x f64
//! ```
//!
//! Little-endian throughout. Parameters are the network's flattened
//! parameters (layer by layer, weights then bias); for an encoder pair the
//! encoder's come first.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, ByteReader};
use crate::baselines::LinearModel;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::simnet::{ArchConfig, EndToEndModel, InputNorm, SimNetModel};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SIMC";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    SimNet,
    Linear,
    EncoderSimNet,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::SimNet => 0,
            CheckpointKind::Linear => 1,
            CheckpointKind::EncoderSimNet => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(CheckpointKind::SimNet),
            1 => Some(CheckpointKind::Linear),
            2 => Some(CheckpointKind::EncoderSimNet),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::SimNet => "simnet",
            CheckpointKind::Linear => "linear",
            CheckpointKind::EncoderSimNet => "encoder+simnet",
        }
    }
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    SimNet(SimNetModel),
    Linear(LinearModel),
    EncoderSimNet(EndToEndModel),
}

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Checkpoint::SimNet(_) => CheckpointKind::SimNet,
            Checkpoint::Linear(_) => CheckpointKind::Linear,
            Checkpoint::EncoderSimNet(_) => CheckpointKind::EncoderSimNet,
        }
    }

    fn mismatch(&self, expected: CheckpointKind) -> Error {
        Error::KindMismatch { expected: expected.name(), found: self.kind().to_string() }
    }

    pub fn into_simnet(self) -> Result<SimNetModel> {
        match self {
            Checkpoint::SimNet(m) => Ok(m),
            other => Err(other.mismatch(CheckpointKind::SimNet)),
        }
    }

    pub fn into_linear(self) -> Result<LinearModel> {
        match self {
            Checkpoint::Linear(m) => Ok(m),
            other => Err(other.mismatch(CheckpointKind::Linear)),
        }
    }

    pub fn into_end_to_end(self) -> Result<EndToEndModel> {
        match self {
            Checkpoint::EncoderSimNet(m) => Ok(m),
            other => Err(other.mismatch(CheckpointKind::EncoderSimNet)),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arch: Option<ArchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_norm: Option<InputNorm>,
    dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder_dims: Option<Vec<usize>>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let (meta, params) = match ckpt {
        Checkpoint::SimNet(m) => (
            Meta {
                arch: Some(m.arch().clone()),
                input_norm: Some(m.input_norm()),
                dims: m.network().dims(),
                encoder_dims: None,
            },
            m.network().params(),
        ),
        Checkpoint::Linear(m) => {
            let mut params = m.weights().to_vec();
            params.push(m.bias());
            (Meta { arch: None, input_norm: None, dims: vec![2 * m.dim(), 1], encoder_dims: None }, params)
        }
        Checkpoint::EncoderSimNet(e) => {
            let mut params = e.encoder.params();
            params.extend(e.model.network().params());
            (
                Meta {
                    arch: Some(e.model.arch().clone()),
                    input_norm: Some(e.model.input_norm()),
                    dims: e.model.network().dims(),
                    encoder_dims: Some(e.encoder.dims()),
                },
                params,
            )
        }
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(25 + meta.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(ckpt.kind().tag());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn dims_params(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes, path);
    let magic = r.array::<4>("magic")?;
    if &magic != MAGIC {
        return Err(r.error(0, format!("bad magic {magic:?}, expected \"SIMC\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let kind_at = r.offset();
    let tag = r.u8("kind")?;
    let kind =
        CheckpointKind::from_tag(tag).ok_or_else(|| r.error(kind_at, format!("unknown model kind {tag}")))?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.offset();
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| r.error(meta_at, format!("bad metadata: {e}")))?;
    let count_at = r.offset();
    let count = r.u64("parameter count")?;
    if count.checked_mul(8) != Some(r.remaining() as u64) {
        return Err(
            r.error(count_at, format!("{count} parameters declared but {} bytes follow", r.remaining()))
        );
    }
    let params_at = r.offset();
    let params = (0..count).map(|_| r.f64("parameter")).collect::<Result<Vec<f64>>>()?;
    let bad = |message: String| Error::Format { path: path.to_path_buf(), offset: params_at as u64, message };
    let simnet = |params: &[f64]| -> Result<SimNetModel> {
        let arch = meta.arch.clone().ok_or_else(|| bad("missing architecture".into()))?;
        let net = Network::from_flat(&meta.dims, params)?;
        SimNetModel::from_parts(arch, net, meta.input_norm.unwrap_or_default())
    };
    Ok(match kind {
        CheckpointKind::SimNet => Checkpoint::SimNet(simnet(&params)?),
        CheckpointKind::Linear => {
            let (bias, weights) = params.split_last().ok_or_else(|| bad("no parameters".into()))?;
            if meta.dims != [weights.len(), 1] {
                return Err(bad(format!(
                    "linear dims {:?} do not match {} weights",
                    meta.dims,
                    weights.len()
                )));
            }
            Checkpoint::Linear(LinearModel::from_parts(weights.to_vec(), *bias)?)
        }
        CheckpointKind::EncoderSimNet => {
            let enc_dims = meta.encoder_dims.clone().ok_or_else(|| bad("missing encoder dims".into()))?;
            let split = dims_params(&enc_dims);
            if split > params.len() {
                return Err(bad(format!("encoder needs {split} parameters, file has {}", params.len())));
            }
            let encoder = Network::from_flat(&enc_dims, &params[..split])?;
            Checkpoint::EncoderSimNet(EndToEndModel::new(encoder, simnet(&params[split..])?)?)
        }
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    Ok(write_atomic(path, &encode_checkpoint(ckpt))?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, path)
}
