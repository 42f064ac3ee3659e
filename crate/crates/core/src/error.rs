use thiserror::Error;

/// Errors raised by the solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("field shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("right-hand side has nonvanishing mean {mean:e} (relative {relative:e}) for T = inf")]
    MeanNotZero { mean: f64, relative: f64 },

    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("line search stalled at Newton iteration {iteration} (residual {residual:e})")]
    LineSearchStall { iteration: usize, residual: f64 },

    #[error("no grid node inside the ball of radius {radius}")]
    EmptyBall { radius: f64 },

    #[error("derivative of order {0} is not available")]
    OrderUnavailable(usize),

    #[error("partition order {0} exceeds the supported maximum of 6")]
    OrderTooLarge(usize),

    #[error("missing subcorrector for subset {0}")]
    MissingSubcorrector(String),

    #[error("degenerate points for log-log fit: {0}")]
    DegeneratePoints(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{failed} of {total} samples failed (first error: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("malformed field file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
