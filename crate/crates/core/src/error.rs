use std::path::PathBuf;

use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DnpError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid {what}: {detail}")]
    Validation { what: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("mode mismatch: {0}")]
    Mode(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("frame index {index} out of range for {len} frames")]
    Index { index: usize, len: usize },
}

impl DnpError {
    pub fn validation(what: &'static str, detail: impl Into<String>) -> Self {
        DnpError::Validation {
            what,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DnpError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        DnpError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DnpError::Validation { .. } | DnpError::Contract(_) | DnpError::Mode(_) | DnpError::Index { .. }
        )
    }
}

pub type Result<T, E = DnpError> = std::result::Result<T, E>;
