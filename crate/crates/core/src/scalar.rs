//! Scalar abstraction shared by the tensor, autodiff and model code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless widening used for persistence and reporting.
    fn widen(self) -> f64;
    fn lit(v: f64) -> Self;

    fn of_usize(v: usize) -> Self {
        Self::lit(v as f64)
    }
}

impl Scalar for f32 {
    fn widen(self) -> f64 {
        self as f64
    }
    fn lit(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn widen(self) -> f64 {
        self
    }
    fn lit(v: f64) -> Self {
        v
    }
}
