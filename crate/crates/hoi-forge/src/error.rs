//! Crate-wide error type.
//!
//! Categories map onto the CLI exit codes: verification failures exit 1,
//! I/O errors exit 2, input parse errors exit 3, configuration errors
//! exit 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric computation produced NaN or infinity.
    #[error("numeric failure in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// Bad configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary or text payload failed to parse.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    /// A prompt is missing required annotation structure.
    #[error("annotation error: {0}")]
    Annotation(String),

    /// A check or verification pass failed.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn parse(offset: u64, detail: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            detail: detail.into(),
        }
    }

    pub fn annotation(msg: impl Into<String>) -> Self {
        Error::Annotation(msg.into())
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 1,
            Error::Io(_) => 2,
            Error::Parse { .. } | Error::Annotation(_) => 3,
            Error::Config(_) => 4,
            // Contract/numeric failures are internal bugs; treat as
            // verification failures at the process boundary.
            Error::Contract(_) | Error::Numeric { .. } => 1,
            Error::Json(_) => 3,
        }
    }
}
