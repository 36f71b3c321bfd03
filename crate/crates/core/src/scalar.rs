//! Floating-point scalar abstraction shared by the tensor core.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of [`Tensor`](crate::tensor::Tensor): `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + LowerExp + Sum + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
