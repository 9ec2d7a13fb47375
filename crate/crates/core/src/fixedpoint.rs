//! Bit-exact signed fixed-point arithmetic.
//!
//! Values are two's-complement integers `raw` interpreted as
//! `raw * 2^-frac_bits`. A format always carries one sign bit, so
//! `total_bits = 1 + int_bits + frac_bits`. Rounding is round-half-to-even and
//! overflow saturates at the ends of the representable range.
//!
//! A dense-layer neuron is modelled as one MAC pipeline: every product is kept
//! at full precision (`2 * frac_bits` fraction bits), the bias is aligned to
//! that precision, and the sum is requantized once at the end. The modelled
//! accumulator is `2 * total_bits + 16` bits wide; it is emulated with an exact
//! `i64` (or `i128` when needed) so no intermediate rounding ever happens.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rounding {
    NearestEven,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Overflow {
    Saturate,
}

/// Guard bits of the modelled MAC accumulator on top of the `2 * total_bits`
/// needed for a single full-precision product.
pub const ACCUMULATOR_GUARD_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QFormat {
    total_bits: u32,
    int_bits: u32,
    frac_bits: u32,
    rounding: Rounding,
    overflow: Overflow,
}

impl QFormat {
    pub const MIN_TOTAL_BITS: u32 = 8;
    pub const MAX_TOTAL_BITS: u32 = 32;
    pub const DEFAULT_INT_BITS: u32 = 3;

    pub fn new(total_bits: u32, int_bits: u32) -> Result<Self> {
        let invalid = Error::InvalidBitAllocation { total_bits, int_bits };
        if !(Self::MIN_TOTAL_BITS..=Self::MAX_TOTAL_BITS).contains(&total_bits) {
            return Err(invalid);
        }
        // one sign bit and at least one fraction bit
        if int_bits + 2 > total_bits {
            return Err(invalid);
        }
        Ok(QFormat {
            total_bits,
            int_bits,
            frac_bits: total_bits - 1 - int_bits,
            rounding: Rounding::NearestEven,
            overflow: Overflow::Saturate,
        })
    }

    /// `total_bits` with the default three integer bits.
    pub fn with_default_int_bits(total_bits: u32) -> Result<Self> {
        Self::new(total_bits, Self::DEFAULT_INT_BITS)
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn overflow(&self) -> Overflow {
        self.overflow
    }

    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_raw(&self) -> i32 {
        (-(1i64 << (self.total_bits - 1))) as i32
    }

    pub fn max_raw(&self) -> i32 {
        ((1i64 << (self.total_bits - 1)) - 1) as i32
    }

    pub fn min_value(&self) -> f64 {
        self.raw_to_real(self.min_raw())
    }

    pub fn max_value(&self) -> f64 {
        self.raw_to_real(self.max_raw())
    }

    pub fn accumulator_bits(&self) -> u32 {
        2 * self.total_bits + ACCUMULATOR_GUARD_BITS
    }

    pub fn raw_to_real(&self, raw: i32) -> f64 {
        raw as f64 * self.step()
    }

    /// Rounds `x` to the grid and saturates; the flag reports saturation.
    pub(crate) fn quantize_raw(&self, x: f64) -> Result<(i32, bool)> {
        if !x.is_finite() {
            return Err(Error::NonFiniteInput(x));
        }
        // scaling by a power of two is exact short of overflow to infinity,
        // which the comparisons below treat as saturation as well
        let scaled = (x * (self.frac_bits as f64).exp2()).round_ties_even();
        if scaled > self.max_raw() as f64 {
            Ok((self.max_raw(), true))
        } else if scaled < self.min_raw() as f64 {
            Ok((self.min_raw(), true))
        } else {
            Ok((scaled as i32, false))
        }
    }

    /// True if `x` is exactly representable in this format.
    pub fn is_on_grid(&self, x: f64) -> bool {
        match self.quantize_raw(x) {
            Ok((raw, _)) => self.raw_to_real(raw) == x,
            Err(_) => false,
        }
    }

    fn check_raw(&self, raw: i64) -> Result<i32> {
        if raw < self.min_raw() as i64 || raw > self.max_raw() as i64 {
            return Err(Error::InvalidParameters(format!(
                "raw value {raw} outside the {self} range"
            )));
        }
        Ok(raw as i32)
    }

    fn saturate(&self, raw: i128) -> i32 {
        raw.clamp(self.min_raw() as i128, self.max_raw() as i128) as i32
    }

    fn ensure_same(&self, other: &QFormat) -> Result<()> {
        if self != other {
            return Err(Error::FormatMismatch(self.to_string(), other.to_string()));
        }
        Ok(())
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.total_bits, self.int_bits)
    }
}

pub fn make_qformat(total_bits: u32, int_bits: u32) -> Result<QFormat> {
    QFormat::new(total_bits, int_bits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedScalar {
    raw: i32,
    format: QFormat,
}

impl FixedScalar {
    pub fn from_raw(raw: i64, format: QFormat) -> Result<Self> {
        let raw = format.check_raw(raw)?;
        Ok(FixedScalar { raw, format })
    }

    pub fn zero(format: QFormat) -> Self {
        FixedScalar { raw: 0, format }
    }

    pub fn raw(&self) -> i32 {
        self.raw
    }

    pub fn format(&self) -> QFormat {
        self.format
    }

    pub fn value(&self) -> f64 {
        self.format.raw_to_real(self.raw)
    }
}

/// Row-major tensor of raw fixed-point values sharing one format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedTensor {
    shape: Vec<usize>,
    raw: Vec<i32>,
    format: QFormat,
}

impl FixedTensor {
    pub fn from_raw(shape: Vec<usize>, raw: Vec<i32>, format: QFormat) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != raw.len() {
            return Err(Error::LengthMismatch {
                expected,
                actual: raw.len(),
            });
        }
        for &r in &raw {
            format.check_raw(r as i64)?;
        }
        Ok(FixedTensor { shape, raw, format })
    }

    /// Quantizes `values` (row-major) into a tensor of the given shape.
    pub fn quantize(values: &[f64], shape: Vec<usize>, format: QFormat) -> Result<Self> {
        let raw = values
            .iter()
            .map(|&x| format.quantize_raw(x).map(|(r, _)| r))
            .collect::<Result<Vec<_>>>()?;
        Self::from_raw(shape, raw, format)
    }

    pub fn vector(values: &[f64], format: QFormat) -> Result<Self> {
        Self::quantize(values, vec![values.len()], format)
    }

    pub(crate) fn from_raw_unchecked(shape: Vec<usize>, raw: Vec<i32>, format: QFormat) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), raw.len());
        FixedTensor { shape, raw, format }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self) -> &[i32] {
        &self.raw
    }

    pub fn format(&self) -> QFormat {
        self.format
    }

    pub fn get(&self, idx: usize) -> Option<FixedScalar> {
        self.raw.get(idx).map(|&raw| FixedScalar {
            raw,
            format: self.format,
        })
    }

    pub fn to_reals(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| self.format.raw_to_real(r)).collect()
    }
}

pub fn quantize(x: f64, q: QFormat) -> Result<FixedScalar> {
    let (raw, _) = q.quantize_raw(x)?;
    Ok(FixedScalar { raw, format: q })
}

pub fn dequantize(f: FixedScalar) -> f64 {
    f.value()
}

pub fn fx_add(a: FixedScalar, b: FixedScalar) -> Result<FixedScalar> {
    a.format.ensure_same(&b.format)?;
    let sum = a.raw as i128 + b.raw as i128;
    Ok(FixedScalar {
        raw: a.format.saturate(sum),
        format: a.format,
    })
}

pub fn fx_mul(a: FixedScalar, b: FixedScalar) -> Result<FixedScalar> {
    a.format.ensure_same(&b.format)?;
    let q = a.format;
    let product = a.raw as i64 * b.raw as i64;
    Ok(FixedScalar {
        raw: q.saturate(round_shift_even(product as i128, q.frac_bits)),
        format: q,
    })
}

/// One neuron: `sum(a[i] * w[i]) + bias`, accumulated exactly, then a single
/// requantization to `q`.
pub fn fx_dot(a: &FixedTensor, w: &FixedTensor, bias: FixedScalar, q: QFormat) -> Result<FixedScalar> {
    if a.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: w.len(),
        });
    }
    q.ensure_same(&a.format)?;
    q.ensure_same(&w.format)?;
    q.ensure_same(&bias.format)?;
    check_accumulator(a.len())?;
    Ok(FixedScalar {
        raw: mac(w.raw(), a.raw(), bias.raw, q),
        format: q,
    })
}

pub(crate) fn check_accumulator(len: usize) -> Result<()> {
    // |acc| <= (len + 1) * 2^(2T-2) must stay below 2^(2T+15)
    if len as u64 + 1 > 1u64 << (ACCUMULATOR_GUARD_BITS + 1) {
        return Err(Error::AccumulatorOverflow(len));
    }
    Ok(())
}

/// MAC kernel shared by [`fx_dot`] and the fixed-point network forward pass.
/// Callers guarantee equal lengths, a common format and an in-range length.
#[inline]
pub(crate) fn mac(weights: &[i32], input: &[i32], bias: i32, q: QFormat) -> i32 {
    debug_assert_eq!(weights.len(), input.len());
    let frac = q.frac_bits;
    let bound = (weights.len() as u128 + 1) << (2 * q.total_bits - 2);
    let acc: i128 = if bound < 1u128 << 63 {
        let products: i64 = weights.iter().zip(input).map(|(&w, &x)| w as i64 * x as i64).sum();
        (products + ((bias as i64) << frac)) as i128
    } else {
        let products: i128 = weights.iter().zip(input).map(|(&w, &x)| w as i128 * x as i128).sum();
        products + ((bias as i128) << frac)
    };
    q.saturate(round_shift_even(acc, frac))
}

/// `value / 2^shift` rounded half to even. `shift >= 1`.
fn round_shift_even(value: i128, shift: u32) -> i128 {
    let floor = value >> shift;
    let rem = value - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}
