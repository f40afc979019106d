//! Scalar abstraction for voxel intensities: `f32` or `f64`.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point voxel scalar. Geometry and optimizer state stay in `f64`;
/// only the stored intensities are generic.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Send + Sync + Copy + std::fmt::Debug + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
