//! Floating-point abstraction shared by every numeric routine in the crate.

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Real scalar the model is generic over: `f32` or `f64`.
///
/// Besides arithmetic, a scalar knows how to encode itself for the
/// checkpoint payload so that a save/load round trip is bit-exact.
pub trait Scalar: NdFloat + FromPrimitive + Default {
    /// Tag written into checkpoint manifests.
    const DTYPE: &'static str;
    /// Width of one encoded element in bytes.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from `f64`; every finite `f64` maps to a value.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}
