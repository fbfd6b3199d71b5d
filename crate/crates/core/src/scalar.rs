//! Floating-point abstraction shared by the metric computations.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Scalar type used for accuracies, rates and VoC values.
///
/// Implemented for `f32` and `f64`; the crate root exposes `f64` aliases for
/// the common case.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Converts a literal. Panics only if the target cannot represent finite `f64` values.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar literal out of range")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count out of range")
    }

    #[inline]
    fn hundred() -> Self {
        Self::lit(100.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
