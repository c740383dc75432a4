//! Error taxonomy shared across the solver.

use thiserror::Error;

/// Top-level error type. The discriminants map onto the CLI exit codes:
/// configuration errors exit 1, numerical failures exit 2, internal
/// invariant violations exit 3.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("internal invariant violation: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SolverError {
    pub fn exit_code(&self) -> i32 {
        match self {
            SolverError::Config(_) => 1,
            SolverError::Numerical(_) => 2,
            SolverError::Internal(_) => 3,
            SolverError::Io(_) => 1,
        }
    }
}
