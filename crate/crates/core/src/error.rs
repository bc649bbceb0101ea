use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("elevation of {0} degrees puts the camera on the up axis")]
    DegenerateElevation(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("degenerate rotation at view {view}, pixel ({row}, {col}): quaternion norm {norm:e}")]
    DegenerateRotation {
        view: usize,
        row: usize,
        col: usize,
        norm: f64,
    },

    #[error("no valid elements: {0}")]
    Empty(&'static str),

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("views must be grouped into pairs, got {0} views")]
    OddViewCount(usize),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
