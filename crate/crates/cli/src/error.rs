use std::fmt;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;

/// A failure carrying its process exit code: 2 for usage or schema errors,
/// 3 for bad data or a failed verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<rrqr_lora::Error> for CliError {
    fn from(e: rrqr_lora::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<crate::rlmx::ReadError> for CliError {
    fn from(e: crate::rlmx::ReadError) -> Self {
        Self::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
