//! Scalar abstraction shared by the whole model.
//!
//! Training runs in `f32`; gradient checks instantiate the same code with `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts a matrix between scalar types.
pub fn cast<A: Real, B: Real>(x: &Array2<A>) -> Array2<B> {
    x.mapv(|v| B::lit(v.as_f64()))
}

pub fn all_finite<T: Real>(x: &Array2<T>) -> bool {
    x.iter().all(|v| v.is_finite())
}
