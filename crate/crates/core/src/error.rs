use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Escape statistics attached to [`Error::EscapedEnsemble`].
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeStats {
    pub n_chains: usize,
    pub escape_count: usize,
    /// Mean step index at which chains escaped.
    pub mean_escape_step: f64,
    pub first_escape_step: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point outside the potential domain: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unstopped step left the domain at step {step}")]
    Escaped { step: usize },

    #[error(
        "all {} chains escaped the domain (first escape at step {}, mean escape step {:.1})",
        .0.n_chains, .0.first_escape_step, .0.mean_escape_step
    )]
    EscapedEnsemble(EscapeStats),

    #[error("insufficient signal: {usable} usable points, need at least {required}")]
    InsufficientSignal { usable: usize, required: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
