//! Scalar abstraction shared by the numeric parts of the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar used for scores, similarities and metrics.
///
/// Implemented for `f32` and `f64`. Graph ranking tolerances in the tests
/// assume `f64`; the `f32` instantiation is usable with looser tolerances.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`, used for constants.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 constant representable in scalar")
    }

    /// Lossy conversion from a count.
    fn of_usize(value: usize) -> Self {
        Self::from_usize(value).expect("count representable in scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
