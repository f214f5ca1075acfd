use std::fmt;

use mshc_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }

    /// Classify a core error, prefixing `context`.
    pub fn from_core(context: &str, e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::UnknownVariant(_) => EXIT_CONFIG,
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Embedding { .. }
            | Error::Sidecar { .. }
            | Error::Checkpoint(_)
            | Error::DataMismatch(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => EXIT_DATA,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::GradCheck(_) => EXIT_NUMERIC,
            Error::Shape { .. } => 1,
        };
        Self::new(code, format!("{context}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Attach context to core results.
pub trait Context<T> {
    fn ctx(self, context: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for mshc_core::Result<T> {
    fn ctx(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::from_core(context, e))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn ctx(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::data(format!("{context}: {e}")))
    }
}
