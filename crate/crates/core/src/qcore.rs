//! Fixed-point primitives: quantization parameters, dyadic rescalers built
//! straight from binary64 bit fields, the integer rescale itself and int8
//! saturation.
//!
//! A rescaler approximates a real factor `M ∈ (0, 1]` by `m · 2^-s` where
//! `m` is a `k`-bit multiplicand with its leading bit set. `m` is the hidden
//! bit followed by the top `k - 1` mantissa bits of `M` (truncated), and `s`
//! is `(k - 1) - exponent`. Truncation guarantees `m · 2^-s ≤ M`.

use crate::error::{Error, Result};

/// Smallest and largest supported multiplicand widths.
pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;

const MANTISSA_BITS: u32 = 52;
const MANTISSA_MASK: u64 = (1 << MANTISSA_BITS) - 1;
const EXPONENT_BIAS: i32 = 1023;

/// Scale and zero-point of an int8 tensor: `real = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32) -> Result<Self> {
        if !scale.is_normal() || scale <= 0.0 {
            return Err(Error::Domain(format!(
                "scale must be a positive normal number, got {scale:e}"
            )));
        }
        if !(i8::MIN as i32..=i8::MAX as i32).contains(&zero_point) {
            return Err(Error::Domain(format!("zero point {zero_point} outside [-128, 127]")));
        }
        Ok(QuantParams { scale, zero_point })
    }

    /// Parameters of a symmetric tensor (zero point fixed at 0).
    pub fn symmetric(scale: f64) -> Result<Self> {
        Self::new(scale, 0)
    }

    /// `clamp(round_half_up(real / scale) + zero_point)` into int8.
    pub fn quantize(&self, real: f64) -> i8 {
        let q = round_half_up(real / self.scale) + self.zero_point as f64;
        q.clamp(i8::MIN as f64, i8::MAX as f64) as i8
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }
}

/// Rounds to the nearest integer, ties toward +∞.
///
/// `(v + 0.5).floor()` is wrong just below one half (0.49999999999999994 + 0.5
/// rounds up to 1.0 in binary64), so the fractional part is compared instead.
pub fn round_half_up(v: f64) -> f64 {
    let floor = v.floor();
    if v - floor >= 0.5 {
        floor + 1.0
    } else {
        floor
    }
}

/// `value == (1 + fraction) · 2^exponent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloatDecomposition {
    pub fraction: f64,
    pub exponent: i32,
    /// The 52 stored mantissa bits; `fraction == mantissa / 2^52`.
    pub mantissa: u64,
}

impl FloatDecomposition {
    pub fn recompose(&self) -> f64 {
        (1.0 + self.fraction) * 2f64.powi(self.exponent)
    }
}

fn check_rescale_value(value: f64) -> Result<()> {
    if !value.is_normal() || value <= 0.0 || value > 1.0 {
        return Err(Error::Domain(format!(
            "rescale factor must be a normal number in (0, 1], got {value:e}"
        )));
    }
    Ok(())
}

/// Splits a normal binary64 in `(0, 1]` into its mantissa and exponent fields.
pub fn decompose_float(value: f64) -> Result<FloatDecomposition> {
    check_rescale_value(value)?;
    let bits = value.to_bits();
    let mantissa = bits & MANTISSA_MASK;
    let exponent = ((bits >> MANTISSA_BITS) & 0x7ff) as i32 - EXPONENT_BIAS;
    Ok(FloatDecomposition {
        fraction: mantissa as f64 / (1u64 << MANTISSA_BITS) as f64,
        exponent,
        mantissa,
    })
}

/// What to do when a rescale factor needs more than `32 + k - 8` shift bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftPolicy {
    /// Fail with [`Error::RescalerUnderflow`].
    #[default]
    Reject,
    /// Pin `s` at the budget and drop the low bits of `m` (leading bit is lost).
    Clamp,
}

/// `M_q = m · 2^-s`, a `k`-bit dyadic approximation of `real_value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyadicRescaler {
    pub m: u32,
    pub s: u32,
    pub k: u32,
    pub real_value: f64,
}

/// Largest right shift that can still produce a nonzero int8 output.
pub fn shift_budget(k: u32) -> u32 {
    32 + k - 8
}

fn check_bits(k: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&k) {
        return Err(Error::Domain(format!(
            "multiplicand width k = {k} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Builds the `k`-bit rescaler for `value` by bit extraction (no arithmetic
/// on the mantissa), rejecting factors below the shift budget.
pub fn quantize_rescaler(value: f64, k: u32) -> Result<DyadicRescaler> {
    quantize_rescaler_with(value, k, ShiftPolicy::Reject)
}

pub fn quantize_rescaler_with(value: f64, k: u32, policy: ShiftPolicy) -> Result<DyadicRescaler> {
    check_bits(k)?;
    let parts = decompose_float(value)?;
    let kept = k - 1;
    let mut m = (1u64 << kept) | (parts.mantissa >> (MANTISSA_BITS - kept));
    let shift = kept as i32 - parts.exponent;
    debug_assert!(shift >= 1);
    let mut s = shift as u32;
    let budget = shift_budget(k);
    if s > budget {
        match policy {
            ShiftPolicy::Reject => {
                return Err(Error::RescalerUnderflow {
                    value,
                    shift: s,
                    budget,
                    location: None,
                })
            }
            ShiftPolicy::Clamp => {
                let excess = s - budget;
                m = if excess >= 64 { 0 } else { m >> excess };
                s = budget;
            }
        }
    }
    Ok(DyadicRescaler {
        m: m as u32,
        s,
        k,
        real_value: value,
    })
}

impl DyadicRescaler {
    /// Reassembles a rescaler from stored fields, checking every invariant.
    pub fn from_parts(m: u32, s: u32, k: u32, real_value: f64) -> Result<Self> {
        let r = DyadicRescaler { m, s, k, real_value };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.k)?;
        check_rescale_value(self.real_value)?;
        let budget = shift_budget(self.k);
        if self.s < 1 || self.s > budget {
            return Err(Error::Domain(format!("shift {} outside [1, {budget}]", self.s)));
        }
        let top = if self.k == 32 { u32::MAX } else { (1u32 << self.k) - 1 };
        let leading = 1u32 << (self.k - 1);
        // A clamped rescaler sits exactly at the budget and may have lost its leading bit.
        let normalized = self.m >= leading && self.m <= top;
        let clamped = self.s == budget && self.m < leading;
        if !(normalized || clamped) {
            return Err(Error::Domain(format!(
                "multiplicand {} is not a {}-bit value with leading bit set",
                self.m, self.k
            )));
        }
        if self.quantized() > self.real_value {
            return Err(Error::Domain(format!(
                "quantized rescaler {:e} exceeds its real value {:e}",
                self.quantized(),
                self.real_value
            )));
        }
        Ok(())
    }

    /// `m · 2^-s`; exact in binary64 since `m < 2^32`.
    pub fn quantized(&self) -> f64 {
        self.m as f64 * 2f64.powi(-(self.s as i32))
    }

    /// Re-derives the rescaler at another width from the stored real value.
    pub fn at_bits(&self, k: u32) -> Result<DyadicRescaler> {
        quantize_rescaler(self.real_value, k)
    }
}

/// `floor((x·m + 2^(s-1)) / 2^s)` saturated into int32: round-half-up of
/// `x · M_q` with ties toward +∞.
///
/// The product is formed in a 128-bit intermediate. For `k ≤ 31` a 64-bit
/// one suffices; at `k = 32` the rounding addend can carry `x·m` past
/// `i64::MAX`.
pub fn multiply_by_quantized_multiplier(x: i32, r: &DyadicRescaler) -> i32 {
    let rnd = 1i128 << (r.s - 1);
    let mul = x as i128 * r.m as i128 + rnd;
    let res = mul >> r.s;
    res.clamp(i32::MIN as i128, i32::MAX as i128) as i32
}

pub fn saturate_i8(v: i32, lo: i8, hi: i8) -> i8 {
    debug_assert!(lo <= hi);
    v.clamp(lo as i32, hi as i32) as i8
}

/// Rescales an accumulator to the output grid, adds the output zero point
/// and saturates into `[lo, hi]`.
pub fn requantize(acc: i32, r: &DyadicRescaler, z_out: i32, lo: i8, hi: i8) -> i8 {
    let scaled = multiply_by_quantized_multiplier(acc, r);
    saturate_i8(scaled.saturating_add(z_out), lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rescaler(m: u32, s: u32) -> DyadicRescaler {
        DyadicRescaler {
            m,
            s,
            k: 32 - m.leading_zeros(),
            real_value: 1.0,
        }
    }

    /// Independent decomposition: double until the value lands in [1, 2).
    fn doubling_oracle(value: f64) -> (f64, i32) {
        let mut v = value;
        let mut doublings = 0;
        while v < 1.0 {
            v *= 2.0;
            doublings += 1;
        }
        (v - 1.0, -doublings)
    }

    #[test]
    fn decompose_examples() {
        let half = decompose_float(0.5).unwrap();
        assert_eq!((half.fraction, half.exponent), (0.0, -1));
        let one = decompose_float(1.0).unwrap();
        assert_eq!((one.fraction, one.exponent), (0.0, 0));

        let tenth = decompose_float(0.1).unwrap();
        let (fraction, exponent) = doubling_oracle(0.1);
        assert_eq!(tenth.exponent, exponent);
        assert_eq!(exponent, -4);
        assert_eq!(tenth.fraction, fraction);
        assert!((tenth.fraction - 0.6).abs() < 1e-15);
        assert_eq!(tenth.recompose(), 0.1);
    }

    #[test]
    fn decompose_rejects_outside_domain() {
        for bad in [0.0, -0.5, 1.5, f64::NAN, f64::INFINITY, f64::MIN_POSITIVE / 2.0] {
            assert!(matches!(decompose_float(bad), Err(Error::Domain(_))), "{bad}");
        }
    }

    /// Largest `m · 2^-s ≤ value` with `m` a k-bit number with leading bit set.
    fn exhaustive_rescaler(value: f64, k: u32) -> (u32, u32) {
        let mut best: Option<(f64, u32, u32)> = None;
        for s in 1..=56u32 {
            for m in (1u32 << (k - 1))..(1u32 << k) {
                let q = m as f64 * 2f64.powi(-(s as i32));
                if q <= value && best.is_none_or(|(b, _, _)| q > b) {
                    best = Some((q, m, s));
                }
            }
        }
        let (_, m, s) = best.unwrap();
        (m, s)
    }

    #[test]
    fn quantize_rescaler_examples() {
        let r = quantize_rescaler(0.5, 8).unwrap();
        assert_eq!((r.m, r.s, r.quantized()), (128, 8, 0.5));
        let r = quantize_rescaler(1.0, 4).unwrap();
        assert_eq!((r.m, r.s, r.quantized()), (8, 3, 1.0));

        let r = quantize_rescaler(0.1, 8).unwrap();
        assert_eq!((r.m, r.s), exhaustive_rescaler(0.1, 8));
        assert_eq!((r.m, r.s, r.quantized()), (204, 11, 0.099609375));

        let r = quantize_rescaler(0.1, 4).unwrap();
        assert_eq!((r.m, r.s), exhaustive_rescaler(0.1, 4));
        assert_eq!((r.m, r.s, r.quantized()), (12, 7, 0.09375));
    }

    #[test]
    fn quantize_rescaler_matches_exhaustive_search_for_small_widths() {
        for value in [0.3, 0.77, 0.015625, 0.999, 1e-3, 0.4142135623730951] {
            for k in 2..=10 {
                let r = quantize_rescaler(value, k).unwrap();
                // Exhaustive search prefers the smallest s among equal values;
                // compare the represented value and m's width instead.
                let (m, s) = exhaustive_rescaler(value, k);
                assert_eq!(r.quantized(), m as f64 * 2f64.powi(-(s as i32)), "{value} k={k}");
                assert!(r.validate().is_ok());
            }
        }
    }

    #[test]
    fn quantize_rescaler_rejects_bad_inputs() {
        assert!(matches!(quantize_rescaler(0.5, 1), Err(Error::Domain(_))));
        assert!(matches!(quantize_rescaler(0.5, 33), Err(Error::Domain(_))));
        assert!(matches!(quantize_rescaler(1.01, 8), Err(Error::Domain(_))));
        assert!(matches!(quantize_rescaler(0.0, 8), Err(Error::Domain(_))));
    }

    #[test]
    fn tiny_factors_underflow_or_clamp() {
        // 2^-25 is the smallest exponent the budget admits.
        assert!(quantize_rescaler(2f64.powi(-25), 8).is_ok());
        let tiny = 2f64.powi(-26) * 1.5;
        match quantize_rescaler(tiny, 8) {
            Err(Error::RescalerUnderflow { shift, budget, .. }) => {
                assert_eq!(budget, 32);
                assert_eq!(shift, 33);
            }
            other => panic!("expected underflow, got {other:?}"),
        }
        let r = quantize_rescaler_with(tiny, 8, ShiftPolicy::Clamp).unwrap();
        assert_eq!(r.s, 32);
        assert_eq!(r.m, 192 >> 1);
        assert!(r.validate().is_ok());
        assert!(r.quantized() <= tiny);
    }

    #[test]
    fn multiply_examples() {
        assert_eq!(multiply_by_quantized_multiplier(1000, &rescaler(128, 8)), 500);
        assert_eq!(multiply_by_quantized_multiplier(-1000, &rescaler(128, 8)), -500);
        assert_eq!(multiply_by_quantized_multiplier(3, &rescaler(85, 8)), 1);
        assert_eq!(multiply_by_quantized_multiplier(-3, &rescaler(85, 8)), -1);
        assert_eq!(multiply_by_quantized_multiplier(7, &rescaler(204, 11)), 1);
    }

    #[test]
    fn multiply_ties_round_toward_positive_infinity() {
        // 1 · 0.5 = 0.5 -> 1; -1 · 0.5 = -0.5 -> 0.
        let half = rescaler(128, 8);
        assert_eq!(multiply_by_quantized_multiplier(1, &half), 1);
        assert_eq!(multiply_by_quantized_multiplier(-1, &half), 0);
        assert_eq!(multiply_by_quantized_multiplier(-3, &half), -1);
    }

    #[test]
    fn multiply_at_full_width_extremes_does_not_wrap() {
        let r = quantize_rescaler(1.0, 32).unwrap();
        assert_eq!(r.m, 1 << 31);
        assert_eq!(multiply_by_quantized_multiplier(i32::MAX, &r), i32::MAX);
        assert_eq!(multiply_by_quantized_multiplier(i32::MIN, &r), i32::MIN);
        let r = quantize_rescaler(f64::from_bits(0x3fefffffffffffff), 32).unwrap();
        assert_eq!(r.m, u32::MAX);
        // (2^31 - 1)(1 - 2^-32) = 2^31 - 1.5 + 2^-32, which rounds up.
        assert_eq!(multiply_by_quantized_multiplier(i32::MAX, &r), i32::MAX);
        assert_eq!(multiply_by_quantized_multiplier(i32::MIN, &r), i32::MIN + 1);
    }

    #[test]
    fn saturate_examples() {
        assert_eq!(saturate_i8(300, -128, 127), 127);
        assert_eq!(saturate_i8(-5, 0, 127), 0);
        assert_eq!(saturate_i8(42, -128, 127), 42);
    }

    #[test]
    fn requantize_examples() {
        let r = quantize_rescaler(0.37, 8).unwrap();
        assert_eq!(requantize(0, &r, 0, -128, 127), 0);
        assert_eq!(requantize(256, &rescaler(128, 8), -3, -128, 127), 125);
        assert_eq!(requantize(100_000, &rescaler(128, 8), 0, -128, 127), 127);
    }

    #[test]
    fn round_half_up_edges() {
        assert_eq!(round_half_up(0.5), 1.0);
        assert_eq!(round_half_up(-0.5), 0.0);
        assert_eq!(round_half_up(-3.5), -3.0);
        assert_eq!(round_half_up(3.4), 3.0);
        assert_eq!(round_half_up(0.49999999999999994), 0.0);
    }

    #[test]
    fn quant_params_validation() {
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(f64::NAN, 0).is_err());
        assert!(QuantParams::new(0.1, 128).is_err());
        let q = QuantParams::new(0.01, -128).unwrap();
        assert_eq!(q.quantize(0.0), -128);
        assert_eq!(q.quantize(2.55), 127);
        assert_eq!(q.quantize(100.0), 127);
    }
}
