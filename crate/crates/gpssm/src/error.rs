//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A covariance matrix could not be factorized even at the maximum jitter.
    NotPositiveDefinite { context: &'static str, jitter: f64 },
    /// Mismatched dimensions between two quantities that must agree.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// Adaptive quadrature exhausted its refinement budget.
    NonConvergence { what: &'static str },
    /// A transition variant was evaluated without the context it requires
    /// (an inducing-output draw or a sequential function draw).
    MissingContext { variant: &'static str },
    /// A chunk scheme does not partition the sequence.
    InvalidScheme(String),
    /// A gradient entry came back non-finite; names the parameter block.
    NonFiniteGradient { param: String },
    /// The training loop detected sustained divergence of the objective.
    Diverged { iter: usize },
    /// Bad run configuration.
    InvalidConfig(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotPositiveDefinite { context, jitter } => write!(
                f,
                "matrix not positive definite ({context}), gave up at jitter {jitter:e}"
            ),
            Error::DimensionMismatch {
                what,
                expected,
                got,
            } => write!(f, "dimension mismatch in {what}: expected {expected}, got {got}"),
            Error::NonConvergence { what } => write!(f, "quadrature did not converge: {what}"),
            Error::MissingContext { variant } => {
                write!(f, "variant {variant} requires a sampling context")
            }
            Error::InvalidScheme(msg) => write!(f, "invalid chunk scheme: {msg}"),
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient in parameter block '{param}'")
            }
            Error::Diverged { iter } => write!(f, "optimization diverged at iteration {iter}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
