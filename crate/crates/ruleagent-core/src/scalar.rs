//! Floating-point abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Float scalar the model, trainer, metrics, and rule predicates run on.
///
/// Blanket-implemented for anything float-like, which in practice means
/// `f32` and `f64`.
pub trait Scalar:
    Float
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
    /// Lossless widening for persistence and reporting. Named to avoid
    /// clashing with `ToPrimitive::to_f64`, which returns an `Option`.
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar")
    }

    /// Conversion from an `f64` literal or parsed value.
    fn from_f64(value: f64) -> Self {
        <Self as num_traits::NumCast>::from(value).expect("representable scalar")
    }
}

impl<T> Scalar for T where
    T: Float
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
}
