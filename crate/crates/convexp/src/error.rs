use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension cap exceeded: {dims} elements > cap {cap}")]
    DimensionCap { dims: usize, cap: usize },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("operator has no closed-form trace: {0}")]
    NoClosedFormTrace(String),
    #[error("fixed-point iteration did not converge: residual {residual:.3e} after {iters} iterations")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid model file: {0}")]
    ModelFormat(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
