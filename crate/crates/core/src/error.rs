use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("closed-loop matrix is not Schur stable (spectral radius {0})")]
    NotSchur(f64),

    #[error("QP solver hit the iteration limit after {0} iterations")]
    MaxIter(usize),

    #[error("SMPC problem is infeasible at the initial step")]
    InfeasibleStart,

    #[error("invariant violated at step {step}: {detail}")]
    Invariant { step: usize, detail: String },

    #[error("rollout {rollout}: {source}")]
    Rollout {
        rollout: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
