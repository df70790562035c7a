//! Scalar abstraction shared by the tensor tape, the encoders and the metrics.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the learning stack is generic over.
///
/// Implemented for `f32` and `f64`. Gradient checks and closed-form tests run
/// in `f64`; checkpoints always store little-endian `f32`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }

    fn from_f32(x: f32) -> Self {
        Self::of(x as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
