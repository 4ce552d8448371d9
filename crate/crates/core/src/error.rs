use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch { context: &'static str, expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("forward cache does not belong to this network: {0}")]
    StaleCache(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("no training pairs")]
    EmptyPairs,

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("query {query} has no relevant gallery item")]
    NoRelevant { query: usize },

    #[error("no query with a relevant gallery item ({skipped} skipped)")]
    NoValidQueries { skipped: usize },

    #[error("scorer failed on pair (query {query}, item {item}): {source}")]
    Scorer {
        query: usize,
        item: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: malformed file at byte {offset}: {message}")]
    Format { path: PathBuf, offset: u64, message: String },

    #[error("{path}: unsupported format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },

    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: &'static str, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch { context, expected, actual }
    }
}
