use std::path::PathBuf;

use thiserror::Error;

use crate::diffkernel::KernelError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("quaternion has zero length")]
    DegenerateQuaternion,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("{what}: expected {expected} entries, got {got}")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ImageShape((usize, usize), (usize, usize)),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("pruning would remove every point")]
    EmptyCloud,
    #[error("initialization needs seed points or a positive random count")]
    NoSeedPoints,
    #[error("non-finite loss at iteration {iteration}: {terms}")]
    NonFiniteLoss { iteration: usize, terms: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("manifest frame {frame}: field `{field}`: {reason}")]
    Manifest {
        frame: usize,
        field: &'static str,
        reason: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint section {section} failed its checksum")]
    Checksum { section: u32 },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unsupported image format: {0}")]
    ImageFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
