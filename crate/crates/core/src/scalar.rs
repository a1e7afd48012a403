//! Scalar abstraction for the math kernel.
//!
//! Everything numeric in the model stack is written against [`Scalar`] so the
//! same code runs at `f64` (tests, gradient checks) and `f32` (cheap
//! experiment runs). Checkpoints and datasets are always stored as
//! little-endian `f32` regardless of the in-memory scalar.

use std::fmt::{Debug, Display};
use std::iter::{Product, Sum};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable throughout the kernel.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum<Self>
    + Product<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; the only way constants enter the kernel.
    fn from_f64_c(x: f64) -> Self;

    /// Exact widening (or rounding, for `f32`) view used by logs and reports.
    fn to_f64_c(self) -> f64;
}

macro_rules! scalar_impl {
    ($($t:ty)*) => {$(
        impl Scalar for $t {
            #[inline]
            fn from_f64_c(x: f64) -> Self { x as $t }
            #[inline]
            fn to_f64_c(self) -> f64 { self as f64 }
        }
    )*};
}

scalar_impl! { f32 f64 }

/// Shorthand for pushing an `f64` constant into the generic scalar.
#[inline]
pub fn sc<S: Scalar>(x: f64) -> S {
    S::from_f64_c(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_survive_the_round_trip_at_f64() {
        let x: f64 = sc(0.123456789012345);
        assert_eq!(x, 0.123456789012345);
    }

    #[test]
    fn f32_conversion_rounds_to_nearest() {
        let x: f32 = sc(1.0 + 1e-9);
        assert_eq!(x, 1.0f32);
    }
}
