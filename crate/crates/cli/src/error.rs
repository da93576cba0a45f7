use std::fmt;

use expdelay_core::Error;
use serde::Serialize;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Malformed or inadmissible input. Exit code 2.
    Validation(String),
    /// A factorization or spectral condition failed. Exit code 3.
    Numerical(String),
    /// A statistical check returned FAIL. Exit code 4.
    Statistical(String),
    /// Output could not be written. Exit code 1.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Statistical(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io(_) => "io",
            CliError::Validation(_) => "validation",
            CliError::Numerical(_) => "numerical",
            CliError::Statistical(_) => "statistical",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Validation(m) | CliError::Numerical(m) | CliError::Statistical(m) => m,
        }
    }

    pub fn diagnostic(&self) -> Diagnostic<'_> {
        Diagnostic {
            error: self.kind(),
            message: self.message(),
            exit_code: self.exit_code(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Diagnostic<'a> {
    pub error: &'static str,
    pub message: &'a str,
    pub exit_code: i32,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::SpectrumViolation { .. } | Error::Conditioning { .. } => CliError::Numerical(e.to_string()),
            Error::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
