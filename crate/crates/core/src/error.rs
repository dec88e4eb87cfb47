use thiserror::Error;

#[derive(Debug, Error)]
pub enum HctlError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    TrainingDiverged { iteration: usize, loss: f64 },
    #[error("undefined rate: {0}")]
    UndefinedRate(String),
    #[error("malformed weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HctlError>;

pub(crate) fn invalid(msg: impl Into<String>) -> HctlError {
    HctlError::InvalidArgument(msg.into())
}
