//! Numeric scalar abstraction shared by the scoring, similarity and metric code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable in every float type")
    }

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every float type")
    }

    fn hundred() -> Self {
        Self::from_f64_lossy(100.0)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Descending order for scores that are never NaN.
pub(crate) fn cmp_desc<S: Scalar>(a: S, b: S) -> std::cmp::Ordering {
    b.partial_cmp(&a).unwrap_or(std::cmp::Ordering::Equal)
}
