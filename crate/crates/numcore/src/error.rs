use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

impl NumError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Contract {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
