//! IEEE 754 binary16 conversion with saturation instead of infinity.

use half::f16;

use crate::error::{Error, Result};

/// Largest finite binary16 magnitude, `0x7BFF`.
pub const FP16_MAX: f64 = 65504.0;

/// Rounds to the nearest binary16 code (ties to even). Magnitudes beyond
/// the finite range saturate to `±65504`; the second value reports whether
/// that happened.
pub fn to_fp16_checked(v: f64) -> Result<(u16, bool)> {
    if v.is_nan() {
        return Err(Error::Fp16("cannot encode NaN".into()));
    }
    let h = f16::from_f64(v);
    if h.is_infinite() {
        Ok((if v < 0.0 { 0xFBFF } else { 0x7BFF }, true))
    } else {
        Ok((h.to_bits(), false))
    }
}

pub fn to_fp16(v: f64) -> Result<u16> {
    Ok(to_fp16_checked(v)?.0)
}

pub fn from_fp16(code: u16) -> f64 {
    f16::from_bits(code).to_f64()
}

/// Nearest representable binary16 value, as `f64`.
pub fn round16(v: f64) -> Result<f64> {
    Ok(from_fp16(to_fp16(v)?))
}

/// Encodes a slice, counting saturated entries.
pub(crate) fn encode_slice(values: &[f64], out: &mut Vec<u16>, saturated: &mut usize) -> Result<()> {
    for &v in values {
        let (c, sat) = to_fp16_checked(v)?;
        *saturated += sat as usize;
        out.push(c);
    }
    Ok(())
}
