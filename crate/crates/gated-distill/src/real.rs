//! Scalar abstraction so every kernel runs in both f32 and f64.
//!
//! Experiments default to f32 for speed; the verification suite instantiates
//! the same code at f64 so gradient checks can use tight tolerances.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point scalar used by tensors, losses and the optimizer.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Converts from f64, the type all configuration values are stored in.
    fn of(x: f64) -> Self;

    /// Widens to f64 for logging and serialization.
    fn f64(self) -> f64;

    /// Name recorded in checkpoint manifests ("f32" or "f64").
    fn dtype() -> &'static str;

    /// Size of one scalar in a checkpoint tensor archive.
    fn byte_width() -> usize;

    /// Appends the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one scalar from a little-endian slice of length `byte_width()`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    fn dtype() -> &'static str {
        "f32"
    }

    fn byte_width() -> usize {
        4
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }

    fn dtype() -> &'static str {
        "f64"
    }

    fn byte_width() -> usize {
        8
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}
