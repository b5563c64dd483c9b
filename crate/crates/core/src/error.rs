use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("age {value} is outside the domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },
    #[error("interval is reversed: start {start} > end {end}")]
    Ordering { start: f64, end: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("spline order {order} is not supported here (need at least {min})")]
    UnsupportedOrder { order: usize, min: usize },
    #[error("invalid knot grid: {0}")]
    InvalidGrid(String),
    #[error("invalid hazard specification: {0}")]
    InvalidHazard(String),
    #[error("invalid subject record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("non-finite value for subject `{id}`: {detail}")]
    Numeric { id: String, detail: String },
    #[error("subject `{id}` has no value for covariate `{covariate}`")]
    MissingCovariate { id: String, covariate: String },
    #[error(
        "optimizer did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        last_iterate: Vec<f64>,
    },
    #[error("smoothing selection failed at every grid point: {0}")]
    SmoothingFailed(String),
    #[error("age grids differ: {0}")]
    GridMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("conflicting exam rows for subject `{id}` (rows {rows:?}): {reason}")]
    Conflict {
        id: String,
        rows: Vec<usize>,
        reason: String,
    },
    #[error("schema error at row {row}: {reason}")]
    Schema { row: usize, reason: String },
    #[error("covariance matrix is unavailable")]
    NoCovariance,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
