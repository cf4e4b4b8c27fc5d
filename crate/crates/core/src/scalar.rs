//! Scalar abstraction shared by every numeric kernel.
//!
//! The engine runs in `f32` in production; `f64` instantiations are used by
//! the frontend (MFCC is computed in double precision) and by tests that need
//! tighter tolerances than single precision can express.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// Real scalar type accepted by tensors and kernels.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + FftNum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Size of one value in bytes, used for memory accounting.
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Lossless for every `f32` input.
    fn widen_f32(v: f32) -> Self;

    fn to_f32_lossy(self) -> f32;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    #[inline]
    fn widen_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    #[inline]
    fn widen_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

/// Shorthand for literal constants inside generic code.
#[inline]
pub(crate) fn lit<S: Scalar>(v: f64) -> S {
    S::from_f64_lossy(v)
}
