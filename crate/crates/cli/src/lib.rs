//! Library surface of the CLI: WAV I/O, config-file parsing and the
//! subcommand implementations. The binary in `main.rs` only parses
//! arguments and maps errors to exit codes.

pub mod commands;
pub mod config;
pub mod wav;

/// CLI failure carrying its intended process exit code: 2 for usage and
/// validation problems, 3 for runtime processing errors.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { exit_code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { exit_code: 3, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<aenr_core::Error> for CliError {
    fn from(e: aenr_core::Error) -> Self {
        match e {
            aenr_core::Error::Config(_) | aenr_core::Error::InvalidInput(_) => {
                Self::usage(e.to_string())
            }
            other => Self::runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
