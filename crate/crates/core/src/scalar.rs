//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All physics, policy, cost and model code is written against [`Real`], so
//! the same source runs on `f32`, `f64` and the tape-recorded
//! [`Var`](crate::grad::Var) used for gradients.

use std::fmt::Debug;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating point scalar usable by the numeric core.
pub trait Real: Float + FloatConst + FromPrimitive + Debug {
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// The plain `f64` value, discarding any derivative information.
    fn value(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for [`Real::lit`].
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::lit(x)
}

/// Maximum of the absolute values in a slice.
pub fn max_abs<T: Real>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}
