use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("solver failed to converge after {iterations} iterations (last residual {last_residual:.3e})")]
    Solver {
        iterations: usize,
        last_residual: f64,
        residual_history: Vec<f64>,
    },
    /// Work beyond a resource budget; `partial` holds the JSON of whatever completed.
    #[error("budget exceeded: {message} (completed scales {completed:?})")]
    Budget {
        message: String,
        completed: Vec<u32>,
        partial: Option<String>,
    },
    #[error("ensemble failed: {failed} of {total} members failed (first: {first})")]
    Ensemble {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
