//! Command-line front end for the fcvi simulator: scenario files, batch runs
//! over modes and seeds, and report tables.

pub mod config;
pub mod report;
pub mod run;

use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, unreadable or invalid scenario. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running or reading outputs. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}
