//! Scalar abstraction for the numerical core.

use nalgebra::RealField;
use num_traits::NumCast;

/// Floating-point scalar for all core math: `f32` or `f64`.
pub trait Real: RealField + NumCast + Copy {}

impl<T> Real for T where T: RealField + NumCast + Copy {}

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Convert the working scalar back to `f64` (exact for `f32`/`f64`).
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    NumCast::from(x).expect("scalar representable as f64")
}
