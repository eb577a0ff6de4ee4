//! Simulation-based tuning of regularization strength for multi-slice
//! super-resolution reconstruction.
//!
//! The crate covers the full loop: a synthetic multi-tissue brain phantom
//! rendered to T2-weighted signal ([`phantom`]), simulation of thick-slice,
//! motion-corrupted low-resolution series ([`acquisition`]), a sparse
//! forward/adjoint acquisition operator ([`forward`]), variational
//! reconstruction with total-variation or first-order Tikhonov
//! regularization ([`solvers`]), image-quality metrics against the known
//! ground truth ([`evaluation`]), rank-based significance tests ([`stats`]),
//! and grid-search protocols that pick the regularization weight
//! ([`tuner`]). Volumes move in and out as a small NIfTI-1 subset
//! ([`nifti`]).

pub mod error;
pub mod seeds;
pub mod geometry;
pub mod phantom;
pub mod acquisition;
pub mod forward;
pub mod solvers;
pub mod evaluation;
pub mod stats;
pub mod tuner;
pub mod nifti;

pub use error::{Error, Result};
pub use geometry::{Orientation, RigidTransform, Volume3D, VolumeGeometry};
