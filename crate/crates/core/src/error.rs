use thiserror::Error;

use crate::autodiff::Op;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A tape node produced a NaN or infinite value or partial derivative.
    #[error("non-finite value at tape node {node} ({op:?})")]
    NonFinite { node: usize, op: Op },

    #[error("scalar is not recorded on this tape")]
    NotOnTape,

    /// The gradient of the log density became non-finite during Hamiltonian dynamics.
    #[error("Hamiltonian dynamics diverged at leapfrog step {step}")]
    Divergence { step: usize },

    #[error("chain step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),

    #[error("grid too small: boundary density ratio {ratio:.3e} exceeds {threshold:.1e}")]
    GridTooSmall { ratio: f64, threshold: f64 },

    #[error("quadrature mass {mass:.6} outside [{lo}, {hi}]")]
    MassOutOfRange { mass: f64, lo: f64, hi: f64 },

    #[error("degenerate fit: {0}")]
    Degenerate(&'static str),

    #[error("non-finite gradient at iteration {iteration}")]
    OptimizerNonFinite { iteration: usize },

    #[error("too many failed draws: {failed} of {attempted} in the window ending at iteration {iteration}")]
    TooManyFailures {
        iteration: usize,
        failed: usize,
        attempted: usize,
    },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the error came from a sampled draw going bad, as opposed to misuse.
    pub fn is_failed_draw(&self) -> bool {
        match self {
            Error::Divergence { .. } | Error::NonFinite { .. } => true,
            Error::StepFailed { source, .. } => source.is_failed_draw(),
            _ => false,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
