//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar the models are generic over (`f32` or `f64`).
///
/// Special functions (log-gamma) and random variates are evaluated in `f64`
/// and converted, so `f32` instantiations trade accuracy for memory only.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + FloatConst + Default + Debug + Display + Send + Sync
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Real scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(x: usize) -> Self {
        Self::lit(x as f64)
    }

    #[inline]
    fn is_finite_val(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}
