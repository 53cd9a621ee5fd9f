use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("node {0} has no value; run forward first")]
    NotEvaluated(usize),
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
    #[error("invalid tensor: {0}")]
    Tensor(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("non-finite gradient during backpropagation through {steps} denoising steps; per-step gradient norms {norms:?}")]
    ExplodingChain { steps: usize, norms: Vec<f64> },
    #[error("log-likelihood is intractable for this policy")]
    IntractableLogProb,
    #[error("stale rollout: collected at policy version {rollout}, policy is at {policy}")]
    StaleRollout { rollout: u64, policy: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Numeric(_) | Error::ExplodingChain { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
