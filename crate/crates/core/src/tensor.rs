//! Scalar trait shared by the f32 training path and the f64 gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float as NumFloat, FromPrimitive};

pub trait Float:
    NumFloat
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {}
impl Float for f64 {}

#[inline]
pub fn cast<T: Float>(v: f64) -> T {
    <T as Float>::from_f64(v)
}

/// Largest absolute element; 0 for an empty array.
pub fn max_abs<T: Float>(a: &ArrayD<T>) -> T {
    a.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}

pub fn all_finite<T: Float>(a: &ArrayD<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn convert<S: Float, D: Float>(a: &ArrayD<S>) -> ArrayD<D> {
    a.mapv(|v| cast::<D>(v.as_f64()))
}
