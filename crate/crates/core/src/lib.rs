//! Motion correction toolkit for 4D dynamic contrast-enhanced ultrasound cines.
//!
//! A 3D contrast-mode acquisition has no anatomical B-mode reference, so the
//! correction works purely from the contrast frames themselves: post-injection
//! frames are grouped into short temporal windows, every frame is registered
//! (affine, then B-spline free-form deformation) to its window average, and the
//! realigned window averages are in turn registered to the master average of
//! the whole acquisition so all frames land in one common space.
//!
//! The crate also ships the registration engines themselves (symmetric block
//! matching with least-trimmed-squares affine fitting, NMI-driven FFD), NIfTI-1
//! I/O, evaluation metrics (lesion overlap, inter-frame NCC, lognormal
//! time-intensity-curve fits) and a synthetic phantom generator used for
//! verification.
//!
//! Voxel data is generic over the scalar type (`f32`/`f64` via [`Scalar`]);
//! geometry, transforms and the optimizers run in `f64`. The pipeline default
//! is `f32` storage (see the `*F32` aliases at the crate root).

pub mod affine;
pub mod error;
pub mod eval;
pub mod ffd;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod scalar;
pub mod similarity;
pub mod transform;
pub mod volume;

pub use error::{McError, Result};
pub use scalar::Scalar;
pub use transform::{AffineTransform, DisplacementField, Interpolation, SpatialMapping};
pub use volume::{Cine4, Geometry, Mask3, Volume3};

/// Default pipeline scalar: intensities are carried as 32-bit reals.
pub type Volume3F32 = Volume3<f32>;
pub type Cine4F32 = Cine4<f32>;

/// Double-precision aliases, used mainly by gradient-check tests.
pub type Volume3F64 = Volume3<f64>;
pub type Cine4F64 = Cine4<f64>;
