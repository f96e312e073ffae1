//! Scalar abstraction for the numeric engine: f32 or f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type of every tensor, gradient and optimizer
/// state in the engine. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, rounding if the target is narrower.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to any Scalar")
    }

    /// Widens to `f64` (exact for f32 and f64).
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("any Scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_for_representable_values() {
        assert_eq!(f32::from_f64_lossy(1.5).as_f64(), 1.5);
        assert_eq!(f64::from_f64_lossy(0.1), 0.1);
    }
}
