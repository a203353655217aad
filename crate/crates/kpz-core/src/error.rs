use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("field blew up at t = {time}: max |u_j| = {max_abs:.3e} exceeds threshold {threshold:.3e}")]
    BlowUp {
        time: f64,
        max_abs: f64,
        threshold: f64,
    },

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("invalid time grid: {0}")]
    TimeGrid(String),

    #[error("too few replicas: {got} (need at least {need})")]
    TooFewReplicas { got: usize, need: usize },

    #[error("correlation spread exceeds ring capacity at t = {time}: sqrt(Var) = {spread:.3} >= N/8 = {limit:.3}")]
    SpreadExceedsRing { time: f64, spread: f64, limit: f64 },

    #[error("fit window too narrow: {0}")]
    FitWindow(String),

    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),

    #[error("sector basis too large: dimension {dim} exceeds cap {cap}")]
    BasisOverflow { dim: usize, cap: usize },

    #[error("input rejected: {0}")]
    InvalidInput(String),
}
