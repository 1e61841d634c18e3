//! Scalar abstractions shared by the solvers.
//!
//! Most of the exact machinery (traffic equations, min-cost flow, simplex,
//! mean value analysis) only needs field arithmetic and an ordering, so it is
//! written against [`Scalar`]. That lets the same code run on `f64` for speed
//! and on [`Rational64`] when a test needs exact answers. Anything that needs
//! logarithms or `exp` asks for [`Real`] instead.

use std::fmt::{Debug, Display};

use num_rational::Rational64;
use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive};

/// Ordered field element usable by the exact solvers.
pub trait Scalar:
    Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Absolute tolerance below which a quantity is treated as zero.
    ///
    /// Zero for exact types.
    fn tolerance() -> Self;

    /// Largest integer not above `self`.
    fn floor_int(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("value not representable in scalar type")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("value not representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `self` is zero up to [`Scalar::tolerance`] scaled by `scale`.
    fn near_zero(self, scale: Self) -> bool {
        let s = if scale.abs() > Self::one() { scale.abs() } else { Self::one() };
        self.abs() <= Self::tolerance() * s
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn tolerance() -> Self {
        1e-12
    }

    fn floor_int(self) -> Self {
        self.floor()
    }
}

impl Scalar for f32 {
    fn tolerance() -> Self {
        1e-5
    }

    fn floor_int(self) -> Self {
        self.floor()
    }
}

impl Scalar for Rational64 {
    fn tolerance() -> Self {
        Rational64::from_integer(0)
    }

    fn floor_int(self) -> Self {
        self.floor()
    }
}

/// Floating-point scalar: everything in [`Scalar`] plus transcendental functions.
pub trait Real: Scalar + Float {}

impl Real for f64 {}
impl Real for f32 {}

/// Sum of an iterator of scalars.
pub fn sum<T: Scalar>(it: impl IntoIterator<Item = T>) -> T {
    it.into_iter().fold(T::zero(), |a, b| a + b)
}
