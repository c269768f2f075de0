use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("context overflow: sequence needs {needed} positions but max_context is {max}")]
    ContextOverflow { needed: usize, max: usize },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("artifact mismatch for {what}: expected {expected}, found {found}")]
    ArtifactMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("output already exists: {0} (pass --overwrite to replace)")]
    OutputExists(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::OutputExists(_) => 2,
            Error::ArtifactMismatch { .. } => 3,
            Error::NonFinite { .. } | Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}
