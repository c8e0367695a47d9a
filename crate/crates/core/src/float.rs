//! Scalar abstraction so every model path runs in f32 or f64.
//!
//! Checkpoints store 32-bit values; gradient checks run the same code in
//! 64-bit. `Real` is the single bound all numeric modules use.

use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point scalar usable throughout the toolkit.
pub trait Real: NdFloat + FromPrimitive + Sum + Send + Sync {
    /// Bit width, recorded in checkpoint metadata as the compute mode.
    const BITS: u8;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    const BITS: u8 = 32;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn of_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const BITS: u8 = 64;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn of_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Shorthand for `F::of_f64` in expression-heavy code.
#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::of_f64(x)
}
