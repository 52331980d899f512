use std::path::PathBuf;

use thiserror::Error;

/// Reasons a tour (node sequence) is not a permutation of the instance nodes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TourError {
    #[error("node {index} appears more than once in the tour")]
    Duplicate { index: usize },
    #[error("node {index} is missing from the tour")]
    Missing { index: usize },
    #[error("node index {index} is out of range for {n} nodes")]
    OutOfRange { index: usize, n: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tour: {0}")]
    Tour(#[from] TourError),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate instance: {0}")]
    Degenerate(String),

    #[error("coordinates must lie in the unit square (node {node}: ({x}, {y})); normalize first")]
    NotNormalized { node: usize, x: f64, y: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no unvisited candidate nodes remain")]
    NoCandidates,

    #[error("context query needs at least one visited node")]
    EmptyRoute,

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("instance too large: {n} nodes exceeds the limit of {max}")]
    TooLarge { n: usize, max: usize },

    #[error("TSPLIB parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported TSPLIB format: {0}")]
    Unsupported(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch for tensor `{name}`: {msg}")]
    CheckpointShape { name: String, msg: String },

    #[error("checkpoint blob truncated: need {needed} bytes, found {found}")]
    CheckpointTruncated { needed: usize, found: usize },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
