use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors shared by every stage of the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A request field failed validation; `path` locates it in the document.
    #[error("invalid field `{path}`: {message}")]
    InvalidField { path: String, message: String },

    #[error("region selects no vertex: {0}")]
    EmptyRegion(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate reference: {0}")]
    DegenerateReference(String),

    #[error("site `{site}` contains no vertex at grid level {level}")]
    EmptySite { site: String, level: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code used by the HTTP and CLI layers.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidField { .. } => "invalid_argument",
            Error::EmptyRegion(_) => "empty_region",
            Error::NotFound(_) => "not_found",
            Error::Format(_) => "format_error",
            Error::CorruptFile(_) => "corrupt_file",
            Error::Shape(_) => "shape_mismatch",
            Error::DegenerateReference(_) => "degenerate_reference",
            Error::EmptySite { .. } => "empty_site",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid_field(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::InvalidField { path: path.into(), message: message.into() }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
