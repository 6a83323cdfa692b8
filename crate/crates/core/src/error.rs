use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("matrix is numerically singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("no strictly feasible point exists")]
    Infeasible,
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64, trace: Vec<f64> },
    #[error("{0}")]
    State(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
