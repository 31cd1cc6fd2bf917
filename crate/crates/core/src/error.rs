use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite integrand value at node {node:?}")]
    NonFinite { node: Vec<f64> },

    #[error("quadrature overflow: integrand grows too fast at {node:?}")]
    QuadratureOverflow { node: Vec<f64> },

    #[error("operator not invertible (det2 = {det2:e})")]
    NotInvertible { det2: f64 },

    #[error("map not monotone at {point:?}: Hessian eigenvalue {eigenvalue} <= -1")]
    NotMonotone { point: Vec<f64>, eigenvalue: f64 },

    #[error("matrix is not symmetric (asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is indefinite (smallest eigenvalue {eigenvalue:e})")]
    Indefinite { eigenvalue: f64 },

    #[error("density is not normalized: E[L] = {mean}")]
    Unnormalized { mean: f64 },

    #[error("density is not integrable: {0}")]
    NotIntegrable(String),

    #[error("density is not H-log-concave: Hessian eigenvalue {eigenvalue} at {point:?}")]
    NotLogConcave { point: Vec<f64>, eigenvalue: f64 },

    #[error("sinkhorn did not converge after {iterations} iterations (residual {residual:e})")]
    SinkhornDiverged { iterations: usize, residual: f64 },

    #[error("too few samples: {0}")]
    InsufficientSamples(String),

    #[error("numerically degenerate: {0}")]
    Degenerate(String),

    #[error("internal cross-check failed: {0}")]
    CrossCheck(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
