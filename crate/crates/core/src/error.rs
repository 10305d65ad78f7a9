use std::path::PathBuf;

use flsc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("{op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("{path}: {reason} at byte offset {offset}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("teacher reached training accuracy {accuracy:.3}, below the required {required:.2}")]
    TeacherUndertrained { accuracy: f64, required: f64 },

    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> CoreError {
    CoreError::Invalid {
        op,
        reason: reason.into(),
    }
}

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CoreError {
    let context = context.into();
    move |source| CoreError::Io { context, source }
}
