//! Floating-point abstraction so the whole engine runs in single or double
//! precision from the same code path.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Working precision of a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Single => f.write_str("single"),
            Precision::Double => f.write_str("double"),
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    /// Raw bit pattern, widened to 64 bits. Used for exact vector identity.
    fn bits(self) -> u64;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }

    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    fn bits(self) -> u64 {
        self.to_bits()
    }

    fn of(v: f64) -> Self {
        v
    }
}

/// Bit-exact key for a vector, suitable for hashing.
pub fn vector_key<T: Scalar>(v: &[T]) -> Vec<u64> {
    v.iter().map(|x| x.bits()).collect()
}

pub fn bitwise_eq<T: Scalar>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits() == y.bits())
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
