use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: non-finite value in forward pass")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("infeasible length {length}: length distribution support is {support:?}")]
    InfeasibleLength { length: usize, support: Vec<usize> },

    #[error("length normalizer {normalizer:e} for l = {length} underflows")]
    Underflow { length: usize, normalizer: f64 },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("grammar line {line}: {msg}")]
    Grammar { line: usize, msg: String },

    #[error("no parse at length {0}")]
    NoParse(usize),

    #[error("no candidate length produced an output (tried {0:?})")]
    NoCandidate(Vec<usize>),

    #[error("{path}:{line}: {msg}")]
    Dataset {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("example {index}: {msg}")]
    Example { index: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, example {example}: loss = {loss}")]
    Diverged {
        epoch: usize,
        example: usize,
        loss: f64,
    },

    #[error("oracle refused: {0}")]
    OracleLimit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }
}
