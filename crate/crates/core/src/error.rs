use thiserror::Error;

pub type Result<T> = std::result::Result<T, GxeError>;

#[derive(Debug, Error)]
pub enum GxeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {what} index {index} (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("penalty matrix is not symmetric: |J[{row},{col}] - J[{col},{row}]| = {gap:.3e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("penalty matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:.3e}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("E matrix is rank deficient (collinear columns: {columns:?})")]
    RankDeficient { columns: Vec<usize> },

    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },

    #[error("zero residual sum of squares; lambda is too small for BIC")]
    ZeroRss,

    #[error("survival data has no events")]
    NoEvents,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl GxeError {
    /// True for failures caused by the numbers rather than by how the call
    /// was made.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GxeError::Numerical { .. }
                | GxeError::RankDeficient { .. }
                | GxeError::NotPsd { .. }
                | GxeError::ZeroRss
                | GxeError::NoEvents
        )
    }
}
