use std::path::PathBuf;

use thiserror::Error;

use crate::volume::{Role, VoxelCoord};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected a {expected} volume, got {found}")]
    RoleMismatch { expected: Role, found: Role },

    #[error("non-finite value {value} at voxel ({}, {}, {})", .voxel.x, .voxel.y, .voxel.z)]
    NonFinite { voxel: VoxelCoord, value: f64 },

    #[error("value {value} at voxel ({}, {}, {}) is outside the range of a {role} volume", .voxel.x, .voxel.y, .voxel.z)]
    OutOfRange {
        voxel: VoxelCoord,
        value: f64,
        role: Role,
    },

    #[error("invalid dimensions {0:?}: every dimension must be positive")]
    InvalidDims([usize; 3]),

    #[error("invalid spacing {0:?}: every component must be finite and positive")]
    InvalidSpacing([f64; 3]),

    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], len: usize },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("volume is empty")]
    EmptyVolume,

    #[error("volume of {voxels} voxels exceeds the exhaustive-sweep guard of {limit}")]
    SizeGuard { voxels: usize, limit: usize },

    #[error("{0} mask is empty")]
    EmptyMask(&'static str),

    #[error("centerline is empty")]
    EmptyCenterline,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite {term} at iteration {iteration}")]
    Numerical { iteration: usize, term: &'static str },

    #[error("phantom placement failed: {0}")]
    Placement(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while decoding or encoding volume files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("unsupported file extension for {0}")]
    UnsupportedExtension(PathBuf),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported datatype code {0}")]
    UnsupportedDtype(i32),

    #[error("compression unsupported")]
    CompressionUnsupported,

    #[error("unsupported dimensionality: {0}")]
    UnsupportedDimensionality(String),

    #[error("malformed json: {0}")]
    Json(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
