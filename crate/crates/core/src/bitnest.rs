//! G32 symmetric INT8 quantization and bit-nested slice arithmetic.
//!
//! An INT8 code `c` in `[-127, 127]` splits into a signed 4-bit MSB slice
//! (`c >> 4`, arithmetic) and an unsigned 4-bit LSB slice (`c & 0x0F`) with
//! `16 * msb + lsb == c`. The MSB slice alone is a usable 4-bit weight on the
//! same scaling grid; [`ReconstructMode`] selects how the missing low bits
//! are approximated.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GROUP_SIZE: usize = 32;
pub const CODE_MAX: i32 = 127;

/// Round to nearest, ties to even.
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Rounds a real to the nearest value representable as an IEEE half float.
pub fn to_f16_precision(x: f64) -> f64 {
    f16::from_f64(x).to_f64()
}

/// Symmetric scale for values whose largest magnitude is `max_abs`, stored at
/// half precision. Zero maps to a unit scale.
pub fn symmetric_scale(max_abs: f64) -> f64 {
    if max_abs == 0.0 {
        1.0
    } else {
        let s = to_f16_precision(max_abs / CODE_MAX as f64);
        // Magnitudes below the smallest subnormal half would round to zero.
        if s > 0.0 {
            s
        } else {
            f16::from_bits(1).to_f64()
        }
    }
}

/// Quantizes one real to a code on the given scale.
pub fn quantize_value(value: f64, scale: f64) -> i8 {
    let q = round_half_even(value / scale).clamp(-CODE_MAX as f64, CODE_MAX as f64);
    q as i8
}

/// 32 signed INT8 codes sharing one half-precision scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantGroup {
    codes: [i8; GROUP_SIZE],
    scale: f64,
}

impl QuantGroup {
    /// Builds a group from raw parts. The scale is rounded to half precision.
    pub fn from_parts(codes: [i8; GROUP_SIZE], scale: f64) -> Result<Self> {
        if let Some(c) = codes.iter().find(|&&c| c == i8::MIN) {
            return Err(Error::invalid(format!("code {c} is reserved")));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        Ok(Self {
            codes,
            scale: to_f16_precision(scale),
        })
    }

    pub fn codes(&self) -> &[i8; GROUP_SIZE] {
        &self.codes
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn slices(&self) -> [BitSlicePair; GROUP_SIZE] {
        self.codes.map(BitSlicePair::from_code_unchecked)
    }

    /// Codes with the low four bits approximated per `mode`.
    pub fn surrogate_codes(&self, mode: ReconstructMode) -> [i32; GROUP_SIZE] {
        self.codes
            .map(|c| BitSlicePair::from_code_unchecked(c).reconstruct(mode))
    }
}

/// Quantizes exactly 32 finite reals with a shared symmetric scale.
pub fn quantize_group(values: &[f64]) -> Result<QuantGroup> {
    if values.len() != GROUP_SIZE {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: GROUP_SIZE,
        });
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite value {v}")));
    }
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = symmetric_scale(max_abs);
    let mut codes = [0i8; GROUP_SIZE];
    for (c, &v) in codes.iter_mut().zip(values) {
        *c = quantize_value(v, scale);
    }
    Ok(QuantGroup { codes, scale })
}

pub fn dequantize(group: &QuantGroup, index: usize) -> Result<f64> {
    group
        .codes
        .get(index)
        .map(|&c| c as f64 * group.scale)
        .ok_or(Error::IndexOutOfRange {
            index,
            len: GROUP_SIZE,
        })
}

/// Signed MSB slice in `[-8, 7]` and unsigned LSB slice in `[0, 15]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitSlicePair {
    msb: i8,
    lsb: u8,
}

impl BitSlicePair {
    pub fn new(msb: i8, lsb: u8) -> Result<Self> {
        if !(-8..=7).contains(&msb) || lsb > 15 {
            return Err(Error::invalid(format!("slice pair ({msb}, {lsb}) out of range")));
        }
        if msb == -8 && lsb == 0 {
            return Err(Error::invalid("slice pair encodes reserved code -128"));
        }
        Ok(Self { msb, lsb })
    }

    fn from_code_unchecked(code: i8) -> Self {
        Self {
            msb: code >> 4,
            lsb: (code as u8) & 0x0F,
        }
    }

    pub fn msb(&self) -> i8 {
        self.msb
    }

    pub fn lsb(&self) -> u8 {
        self.lsb
    }

    pub fn code(&self) -> i32 {
        16 * self.msb as i32 + self.lsb as i32
    }

    pub fn reconstruct(&self, mode: ReconstructMode) -> i32 {
        reconstruct(*self, mode)
    }
}

pub fn split_slices(code: i32) -> Result<BitSlicePair> {
    if !(-CODE_MAX..=CODE_MAX).contains(&code) {
        return Err(Error::invalid(format!("code {code} outside [-127, 127]")));
    }
    Ok(BitSlicePair::from_code_unchecked(code as i8))
}

/// How the low four bits are approximated when only the MSB slice is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructMode {
    /// Drop the LSB slice: `16 * msb`.
    Truncate,
    /// Round the full code to the 4-bit grid, altering the MSB value.
    MsbRound,
    /// Hardwired half-unit offset: `16 * msb + 8`.
    LsbAugment,
    /// Both slices: the original code.
    Full,
}

impl ReconstructMode {
    pub const ALL: [ReconstructMode; 4] = [
        ReconstructMode::Truncate,
        ReconstructMode::MsbRound,
        ReconstructMode::LsbAugment,
        ReconstructMode::Full,
    ];
}

pub fn reconstruct(pair: BitSlicePair, mode: ReconstructMode) -> i32 {
    let msb = pair.msb as i32;
    match mode {
        ReconstructMode::Truncate => 16 * msb,
        ReconstructMode::LsbAugment => 16 * msb + 8,
        ReconstructMode::Full => pair.code(),
        ReconstructMode::MsbRound => {
            let r = round_half_even(pair.code() as f64 / 16.0).clamp(-8.0, 7.0);
            16 * r as i32
        }
    }
}

/// Quantizes a real vector per-tensor onto the INT8 grid.
///
/// Returns the codes and the half-precision scale.
pub fn quantize_tensor(values: &[f64]) -> Result<(Vec<i8>, f64)> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite value {v}")));
    }
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = symmetric_scale(max_abs);
    Ok((values.iter().map(|&v| quantize_value(v, scale)).collect(), scale))
}
