use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("stale sensor stream: {stream} sample is {age_ms:.1} ms old at t={at:.3} s")]
    Staleness {
        stream: &'static str,
        age_ms: f64,
        at: f64,
    },

    #[error("insufficient history: {stream} stream does not reach back to t={needed:.3} s")]
    InsufficientHistory { stream: &'static str, needed: f64 },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("degenerate batch: no anchor has a positive pair")]
    DegenerateBatch,

    #[error("incomplete gait grid: terrain {terrain} is missing cell (step_height={step_height}, hip_splay={hip_splay})")]
    IncompleteGrid {
        terrain: String,
        step_height: f64,
        hip_splay: f64,
    },

    #[error("missing prerequisite: {0}")]
    Dependency(String),

    #[error("training diverged in stage {stage} at epoch {epoch}: loss {loss}")]
    Divergence {
        stage: String,
        epoch: usize,
        loss: f64,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
