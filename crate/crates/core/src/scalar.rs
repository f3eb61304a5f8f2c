//! Scalar abstraction shared by the quantization kernels.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the kernels are generic over (`f32`, `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-as-possible conversion from `f64`.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    /// `2^e` for small integer exponents. Exact for both `f32` and `f64`.
    fn pow2(e: i32) -> Self {
        Self::from_f64_lossy(2f64.powi(e))
    }

    fn from_i64_lossy(v: i64) -> Self {
        <Self as FromPrimitive>::from_i64(v).unwrap_or_else(Self::nan)
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}
