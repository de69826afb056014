//! Scalar abstraction so the whole pipeline runs at either precision.
//!
//! f32 is the working precision of training and the only precision checkpoints
//! store; f64 backs the finite-difference gradient checks, which need the
//! extra mantissa bits to resolve relative errors near 1e-6.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the library is generic over.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Narrowing conversion from f64, the precision literals and RNG draws use.
    fn of(v: f64) -> Self;

    /// Widening (or identity) conversion to f64.
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}
