//! Deterministic synthetic scenes.

use thiserror::Error;

use crate::cfar::CfarError;
use crate::motion::MotionError;
use crate::spurious::SpuriousError;

pub mod export;
pub mod scene;
pub mod two_view;

pub use export::{export, load, verify_manifest, Manifest};
pub use scene::{generate, Provenance, Scene, SceneConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("hash mismatch for {path}")]
    HashMismatch { path: String },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cloud(#[from] SpuriousError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Rdm(#[from] CfarError),
}
