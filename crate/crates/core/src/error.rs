use std::path::PathBuf;

use lazysurf_tape::TapeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyInput,

    #[error("coordinate {0:?} is not finite")]
    NonFinite([f64; 3]),

    #[error("point {point:?} lies outside [-1, 1]^3")]
    OutsideCube { point: [f64; 3] },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("unsupported file extension for {0}")]
    UnsupportedFormat(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration does not match checkpoint ({0})")]
    ConfigMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("sign propagation needs at least one known voxel")]
    NoKnownVoxels,

    #[error("mesh is empty")]
    EmptyMesh,

    #[error(transparent)]
    Tape(#[from] TapeError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
