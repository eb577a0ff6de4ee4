//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across simulation, reconstruction, and IO.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violated a documented invariant (non-positive voxel
    /// size, out-of-range gestational age, empty grid, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Two objects that must share a grid or length do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Volume axes are not orthonormal, or a geometry is otherwise
    /// unusable (zero extent, slice stack longer than the volume, ...).
    #[error("bad geometry: {0}")]
    BadGeometry(String),

    /// The sampling grid cannot hold the requested anatomy.
    #[error("resolution too coarse: {0}")]
    Resolution(String),

    /// A label present in the label volume has no entry in the tissue
    /// table, or the table itself is inconsistent.
    #[error("tissue table: {0}")]
    TissueTable(String),

    /// An iterative solver produced a non-finite iterate or objective.
    #[error("solver diverged: {0}")]
    Divergence(String),

    /// Data that should be finite is not (NaN/inf in an input volume).
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// File does not start with a recognizable NIfTI-1 magic string.
    #[error("not a NIfTI-1 file: bad magic")]
    NiftiBadMagic,

    /// NIfTI-1 datatype code this reader does not support.
    #[error("unsupported NIfTI datatype code {0}")]
    NiftiUnsupportedDatatype(i16),

    /// Header is valid but byte-swapped (big-endian); not supported.
    #[error("unsupported NIfTI encoding: byte-swapped header")]
    NiftiUnsupportedEncoding,

    /// File ends before the voxel data it promises.
    #[error("truncated NIfTI file: expected {expected} data bytes, found {found}")]
    NiftiTruncated { expected: usize, found: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
