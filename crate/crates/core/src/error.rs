use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Why a disruption (or other mutation) was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValidationReason {
    OutOfBounds,
    Unreachable,
    Occupied,
    BadParams,
}

impl ValidationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ValidationReason::OutOfBounds => "OUT_OF_BOUNDS",
            ValidationReason::Unreachable => "UNREACHABLE",
            ValidationReason::Occupied => "OCCUPIED",
            ValidationReason::BadParams => "BAD_PARAMS",
        }
    }
}

impl fmt::Display for ValidationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("E_CONFIG: {0}")]
    Config(String),

    #[error("E_DONE: episode already terminated")]
    Done,

    #[error("E_VALIDATION{}: {message}", reason.map(|r| format!("({r})")).unwrap_or_default())]
    Validation {
        reason: Option<ValidationReason>,
        message: String,
    },

    #[error("E_IO: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("E_PARSE: {file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("E_STATE: {0}")]
    State(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Done => "E_DONE",
            Error::Validation { .. } => "E_VALIDATION",
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
            Error::State(_) => "E_STATE",
        }
    }

    pub fn reason(&self) -> Option<ValidationReason> {
        match self {
            Error::Validation { reason, .. } => *reason,
            _ => None,
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation {
            reason: None,
            message: message.into(),
        }
    }

    pub(crate) fn rejected(reason: ValidationReason, message: impl Into<String>) -> Self {
        Error::Validation {
            reason: Some(reason),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
