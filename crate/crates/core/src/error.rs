use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite even with jitter {0:.3e}")]
    NotPositiveDefinite(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid Matérn smoothness {0}")]
    InvalidSmoothness(f64),
    #[error("Matérn smoothness {0} has no closed form (only half-integers are supported)")]
    UnsupportedSmoothness(f64),
    #[error("invalid kernel width tau = {0}")]
    InvalidTau(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point {0} lies outside the signal domain")]
    OutOfDomain(f64),
    #[error("fine grid size {fine} is not a multiple of coarse grid size {coarse}")]
    GridMismatch { fine: usize, coarse: usize },
    #[error("ground truth has zero norm")]
    ZeroTruth,
    #[error("difference prior needs at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("objective is not finite: {0}")]
    NonFiniteObjective(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
