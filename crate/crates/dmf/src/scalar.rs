use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors.
///
/// The crate runs every kernel in either `f32` (training and inference)
/// or `f64` (gradient-check builds); tolerances in the test suites are
/// stated per width.
pub trait Scalar:
    Float + Sum + Default + Debug + Display + Send + Sync + serde::Serialize + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}
