//! Scalar abstraction shared by the plain and gradient-tracked evaluation paths.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Arithmetic scalar the model code is generic over.
///
/// The two implementations are `f64` (plain evaluation) and
/// [`crate::autodiff::Var`] (tape-recorded evaluation). Both must produce the
/// same primal values for the same inputs, so a tracked run reproduces the
/// plain run bit for bit.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    /// Lift a plain constant. Constants carry no gradient.
    fn from_f64(x: f64) -> Self;

    /// Primal value, used for branching, jitter policy and reporting.
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn powi(self, n: i32) -> Self {
        let mut out = Self::one();
        for _ in 0..n.unsigned_abs() {
            out = out * self;
        }
        if n < 0 {
            Self::one() / out
        } else {
            out
        }
    }

    /// Multiply by a plain constant.
    fn scale(self, c: f64) -> Self {
        self * Self::from_f64(c)
    }

    /// Lower clamp against a plain constant. When the clamp is active the
    /// result is the constant and gradients stop.
    fn clamp_min(self, floor: f64) -> Self {
        if self.value() < floor {
            Self::from_f64(floor)
        } else {
            self
        }
    }

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }

    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }

    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Sum of a sequence of scalars in index order.
pub fn sum<S: Scalar>(xs: impl IntoIterator<Item = S>) -> S {
    let mut acc = S::zero();
    for x in xs {
        acc += x;
    }
    acc
}

/// Dot product in index order.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}
