use std::io;

use mmrefine::cfar::CfarError;
use mmrefine::motion::MotionError;
use mmrefine::sim::SimError;
use thiserror::Error;

/// Failure of a command, mapped onto a stable exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("missing or malformed input: {0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Input(_) => 4,
        }
    }

    /// An I/O failure while writing outputs.
    pub fn write(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// Classifies a failure to read an input: absent files and unreadable
    /// contents are input errors, anything else is an I/O error.
    pub fn read(context: &str, e: SimError) -> Self {
        match e {
            SimError::Io(io) if io.kind() != io::ErrorKind::NotFound => {
                CliError::Io(format!("{context}: {io}"))
            }
            SimError::Motion(MotionError::Io(io)) if io.kind() != io::ErrorKind::NotFound => {
                CliError::Io(format!("{context}: {io}"))
            }
            SimError::Rdm(CfarError::Io(io)) if io.kind() != io::ErrorKind::NotFound => {
                CliError::Io(format!("{context}: {io}"))
            }
            other => CliError::Input(format!("{context}: {other}")),
        }
    }
}
