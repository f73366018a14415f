//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Real floating-point scalar the numerics are generic over.
///
/// Implemented for `f32` and `f64`. Everything that has to be bit-exact on
/// disk (model files, snapshot files) is stored as `f64` regardless.
pub trait Real:
    Float + FloatConst + NumAssign + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Loose tolerance floor for this precision, used where a routine must
    /// decide whether a value is "numerically zero".
    const TOL_FLOOR: f64;

    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn of(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const TOL_FLOOR: f64 = 1e-5;
}

impl Real for f64 {
    const TOL_FLOOR: f64 = 1e-13;
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_two_pi<T: Real>(theta: T) -> T {
    let two_pi = T::TAU();
    let mut r = theta % two_pi;
    if r < T::zero() {
        r += two_pi;
    }
    if r >= two_pi {
        r -= two_pi;
    }
    r
}

/// Wraps an angle difference into `[−π, π)`.
pub fn wrap_pi<T: Real>(x: T) -> T {
    let pi = T::PI();
    let two_pi = T::TAU();
    let mut r = x - two_pi * ((x + pi) / two_pi).floor();
    if r >= pi {
        r -= two_pi;
    }
    if r < -pi {
        r += two_pi;
    }
    r
}
