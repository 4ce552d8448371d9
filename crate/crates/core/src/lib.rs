//! Learned non-metric similarity over feature vectors: a small dense network
//! engine, the pairwise similarity model with its training procedures,
//! baseline similarities, retrieval evaluation and file formats.

pub mod baselines;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod simnet;

pub use error::{Error, Result};
pub use exec::Execution;
