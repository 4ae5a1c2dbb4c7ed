use thiserror::Error;

/// Errors produced by the bound computations and verification harnesses.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented domain.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The caller asked for something the operation cannot do (e.g. too few
    /// Monte Carlo samples to resolve the requested rank).
    #[error("usage error: {0}")]
    Usage(String),

    /// Matrix or vector shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Non-finite values, solver non-convergence, divergence.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: &'static str, detail: String },

    #[error("config file line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numerical(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context,
            detail: detail.into(),
        }
    }

    /// True for failures of the numerics themselves, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
