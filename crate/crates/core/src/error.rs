use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum StcError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("configuration rejected:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("trace parse errors:\n  {}", .0.join("\n  "))]
    Parse(Vec<String>),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite state at t = {time}: {detail}")]
    NonFinite { time: f64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl StcError {
    /// Process exit code for the CLI: 1 for usage/config problems, 2 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            StcError::Numerical(_) | StcError::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, StcError>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(StcError::DimensionMismatch { expected, got })
    }
}
