use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum FlixError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("numeric failure after {iterations} iterations: {msg}")]
    NumericFailure { iterations: usize, msg: String },

    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    ConvergenceFailure { iterations: usize, grad_norm: f64 },

    #[error("iterate diverged at round {round}: {msg}")]
    Diverged { round: usize, msg: String },

    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlixError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FlixError {
    FlixError::InvalidArgument(msg.into())
}

pub(crate) fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(invalid(format!("{what}: expected dimension {expected}, got {got}")));
    }
    Ok(())
}
