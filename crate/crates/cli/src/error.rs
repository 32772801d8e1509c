use std::fmt;

use tgd_core::TgdError;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Configuration problems exit with 2, everything else the core reports
/// is about the data or weights it was handed.
impl From<TgdError> for CliError {
    fn from(e: TgdError) -> Self {
        match e {
            TgdError::Config(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub trait Context<T> {
    fn data_ctx(self, what: impl fmt::Display) -> CliResult<T>;
    fn config_ctx(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn data_ctx(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError::data(format!("{what}: {e}")))
    }

    fn config_ctx(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError::config(format!("{what}: {e}")))
    }
}
