//! Scalar abstraction for the whole crate.
//!
//! All numerical code is generic over [`Real`], which is `f32` or `f64` in
//! practice. The trait bundles the `num-traits` pieces we rely on (floating
//! point ops, conversions, assignment ops) together with the thread-safety
//! and formatting bounds that containers and error messages need.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar used throughout the crate.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working scalar type.
///
/// Panics only if the target type cannot represent the value at all, which
/// never happens for the finite constants this crate feeds it.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 constant must convert to the scalar type")
}

/// Lossy view of a working scalar as `f64`, used for serialization and logs.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("scalar must convert to f64")
}

/// Relative difference `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps comparisons near zero meaningful instead of exploding the
/// denominator; tests pick floors that match the scale of the quantity.
#[inline]
pub fn rel_diff<T: Real>(a: T, b: T, floor: T) -> T {
    (a - b).abs() / (a.abs().max(b.abs()).max(floor))
}
