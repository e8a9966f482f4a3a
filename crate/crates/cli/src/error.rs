use std::fmt;

use mcbw_core::Error;
use serde_json::json;

/// A failed command: exit status plus a one-line JSON diagnostic.
#[derive(Debug)]
pub struct CliError {
    pub exit: i32,
    pub code: &'static str,
    pub message: String,
}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_MISSING: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

impl CliError {
    pub fn missing(message: impl Into<String>) -> Self {
        Self { exit: EXIT_MISSING, code: "missing_input", message: message.into() }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self { exit: EXIT_INVALID, code: "invalid_input", message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { exit: EXIT_RUNTIME, code: "runtime_error", message: message.into() }
    }

    /// Prefixes the message with what was being done.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn to_json_line(&self) -> String {
        json!({ "error": { "code": self.code, "exit": self.exit, "message": self.message } }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::NotFound(_) => Self::missing(message),
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Self::missing(message),
            Error::Shape(_) => Self { code: "shape_mismatch", ..Self::invalid(message) },
            Error::InvalidArgument(_) | Error::InvalidField { .. } | Error::Format(_) | Error::CorruptFile(_) | Error::Json(_) => {
                Self::invalid(message)
            }
            _ => Self::runtime(message),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            Self::missing(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
