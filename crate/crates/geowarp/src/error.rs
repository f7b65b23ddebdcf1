//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by geometry, imaging, loss and dataset operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A quaternion with zero norm cannot be normalized.
    #[error("quaternion has zero norm")]
    InvalidQuaternion,

    /// A rotation matrix failed the orthonormality / determinant check.
    #[error("rotation is not orthonormal with determinant +1 (residual {residual:.3e})")]
    NonRigidTransform { residual: f64 },

    /// Focal lengths or image dimensions out of range.
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    /// Projection of a point at or behind the camera plane.
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    /// Backprojection requires strictly positive depth.
    #[error("depth must be positive (got {depth})")]
    InvalidDepth { depth: f64 },

    /// Buffers that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A precondition on operation inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Fewer than two masked pixels; image statistics are undefined.
    #[error("fewer than two masked pixels, statistics are degenerate")]
    DegenerateStatistics,

    /// A synthetic camera placement does not see the scene plane at
    /// positive depth at every pixel.
    #[error("camera placement does not see the scene plane at positive depth")]
    InvalidPlacement,

    /// A pose file did not contain a rigid transform.
    #[error("invalid pose matrix: {0}")]
    InvalidPose(String),

    /// File-system failure, tagged with the offending path.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image decode/encode failure, tagged with the offending path.
    #[error("{path}: {message}")]
    Codec { path: PathBuf, message: String },

    /// Text parsing failure (pose files, config files, pose lists).
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
