//! Floating point abstraction for the physical-layer math.
//!
//! Loss budgets, rate curves and scheduler duties are written against
//! [`Scalar`] so they can be evaluated in `f32` or `f64`. The rest of the
//! emulator uses the `f64` aliases re-exported at the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real number type usable by the link model.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar.
    fn lit(value: f64) -> Self;

    /// Lossy conversion used for diagnostics and error payloads.
    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn lit(value: f64) -> Self {
                value as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[cfg(test)]
mod tests {
    use super::Scalar;

    #[test]
    fn literals_round_trip() {
        assert_eq!(<f64 as Scalar>::lit(0.2), 0.2);
        assert!((<f32 as Scalar>::lit(0.2).as_f64() - 0.2).abs() < 1e-7);
    }
}
