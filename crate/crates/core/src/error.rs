use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient produced while differentiating `{op}`")]
    NonFiniteGrad { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("label {label} out of range for {classes} classes at pixel (n={n}, y={y}, x={x})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        n: usize,
        y: usize,
        x: usize,
    },

    #[error("{count} pixel(s) with color {color:?} not present in the palette")]
    UnknownColor { color: [u8; 3], count: usize },

    #[error("checkpoint file not found: {0}")]
    CheckpointMissing(PathBuf),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint parameter mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteGrad { .. } | Error::Backward(_) => ErrorClass::Numerical,
            Error::Param(_) | Error::Config(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
