use thiserror::Error;

/// Errors raised by the radial flow laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid nodes are not uniformly spaced (node {index})")]
    NonUniformGrid { index: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate metric at node {index}: density {value:e}")]
    DegenerateMetric { index: usize, value: f64 },

    #[error("Newton iteration failed at t = {t}: residual {residual:e} after {iterations} iterations")]
    NewtonFailed {
        t: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("grid window guard violated: {0}")]
    WindowGuard(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("grids or class paths do not match")]
    GridMismatch,

    #[error("compatibility condition violated: {0}")]
    Incompatible(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("samples are not monotone: {0}")]
    NonMonotone(String),

    #[error("integrability certificate diverged: {0}")]
    CertificateDivergent(String),

    #[error("trajectory does not cover t = {required} (last time {available})")]
    InsufficientCoverage { required: f64, available: f64 },

    #[error("linear program failed: {0}")]
    LinearProgram(String),
}

pub type Result<T> = std::result::Result<T, Error>;
