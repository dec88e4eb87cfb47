use std::path::{Path, PathBuf};

use hctl_core::HctlError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Io { .. } => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

impl From<HctlError> for HarnessError {
    fn from(e: HctlError) -> Self {
        match e {
            HctlError::InvalidArgument(_) | HctlError::Unsupported(_) => HarnessError::Config(e.to_string()),
            HctlError::Io(source) => HarnessError::Io { path: PathBuf::new(), source },
            HctlError::Format(_) => HarnessError::Io {
                path: PathBuf::new(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
            },
            HctlError::Numerical(_) | HctlError::TrainingDiverged { .. } | HctlError::UndefinedRate(_) => {
                HarnessError::Numerical(e.to_string())
            }
        }
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        let path = PathBuf::new();
        match e.into_kind() {
            csv::ErrorKind::Io(source) => HarnessError::Io { path, source },
            other => HarnessError::Io {
                path,
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{other:?}")),
            },
        }
    }
}
