//! Rescale error model.
//!
//! With accumulator `a_q`, real rescale factor `M`, its dyadic approximation
//! `M_q` and the integer rescale result `R = round_half_up(a_q · M_q)`, the
//! error introduced by rescaling, in output units, splits as
//!
//! ```text
//! ε_r = S_y·(R − a_q·M) = S_y·a_q·(M_q − M) + S_y·δ_r,    δ_r = R − a_q·M_q
//! ```
//!
//! Every term is a dyadic rational (binary64 values and `m · 2^-s` are), so
//! the decomposition is carried out exactly in [`Dyadic`] arithmetic and only
//! converted to binary64 at the end.

use std::cmp::Ordering;
use std::ops::{Add, Neg, Sub};

use crate::error::{Error, Result};
use crate::kernels::forward_traced;
use crate::model::{LayerKind, ModelGraph};
use crate::qcore::{multiply_by_quantized_multiplier, quantize_rescaler, DyadicRescaler, MAX_BITS, MIN_BITS};
use crate::tensor::QTensor;

/// An exact value `num · 2^exp`.
#[derive(Debug, Clone, Copy)]
pub struct Dyadic {
    pub num: i128,
    pub exp: i32,
}

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic { num: 0, exp: 0 };

    pub fn from_int(v: i64) -> Dyadic {
        Dyadic { num: v as i128, exp: 0 }
    }

    /// Exact conversion of a finite binary64.
    pub fn from_f64(v: f64) -> Dyadic {
        assert!(v.is_finite(), "non-finite value {v}");
        if v == 0.0 {
            return Dyadic::ZERO;
        }
        let bits = v.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let biased = ((bits >> 52) & 0x7ff) as i32;
        let frac = (bits & ((1 << 52) - 1)) as i128;
        let (mant, exp) = if biased == 0 {
            (frac, -1074)
        } else {
            (frac | (1 << 52), biased - 1075)
        };
        Dyadic { num: sign * mant, exp }
    }

    pub fn from_rescaler(r: &DyadicRescaler) -> Dyadic {
        Dyadic {
            num: r.m as i128,
            exp: -(r.s as i32),
        }
    }

    fn aligned(self, other: Dyadic) -> (i128, i128, i32) {
        let exp = self.exp.min(other.exp);
        let lift = |d: Dyadic| {
            let shift = (d.exp - exp) as u32;
            if d.num == 0 {
                return 0;
            }
            assert!(
                shift < 127 && d.num.unsigned_abs().leading_zeros() > shift + 1,
                "dyadic alignment overflows i128"
            );
            d.num << shift
        };
        (lift(self), lift(other), exp)
    }

    pub fn abs(self) -> Dyadic {
        Dyadic {
            num: self.num.abs(),
            exp: self.exp,
        }
    }

    pub fn mul_int(self, v: i64) -> Dyadic {
        Dyadic {
            num: self.num.checked_mul(v as i128).expect("dyadic product overflows i128"),
            exp: self.exp,
        }
    }

    pub fn half() -> Dyadic {
        Dyadic { num: 1, exp: -1 }
    }

    /// Nearest binary64 (one rounding; monotone in the exact value).
    pub fn to_f64(self) -> f64 {
        self.num as f64 * 2f64.powi(self.exp)
    }

    pub fn cmp_exact(self, other: Dyadic) -> Ordering {
        let (a, b, _) = self.aligned(other);
        a.cmp(&b)
    }
}

impl Add for Dyadic {
    type Output = Dyadic;

    fn add(self, other: Dyadic) -> Dyadic {
        let (a, b, exp) = self.aligned(other);
        Dyadic {
            num: a.checked_add(b).expect("dyadic sum overflows i128"),
            exp,
        }
    }
}

impl Sub for Dyadic {
    type Output = Dyadic;

    fn sub(self, other: Dyadic) -> Dyadic {
        self + -other
    }
}

impl Neg for Dyadic {
    type Output = Dyadic;

    fn neg(self) -> Dyadic {
        Dyadic {
            num: -self.num,
            exp: self.exp,
        }
    }
}

impl PartialEq for Dyadic {
    fn eq(&self, other: &Self) -> bool {
        self.cmp_exact(*other) == Ordering::Equal
    }
}

/// `ε_a = a − S_x·S_w·a_q`.
pub fn accumulator_error(a: f64, a_q: i32, s_x: f64, s_w: f64) -> f64 {
    a - s_x * s_w * a_q as f64
}

/// `ε_y = y − S_y·clamp(y_q_raw, lo, hi)`.
pub fn output_error(y: f64, y_q_raw: i32, s_y: f64, lo: i32, hi: i32) -> f64 {
    y - s_y * y_q_raw.clamp(lo, hi) as f64
}

/// The two parts of the rescale error for one accumulator, exact and rounded.
#[derive(Debug, Clone, Copy)]
pub struct RescaleError {
    /// `S_y·a_q·(M_q − M)`.
    pub mismatch: f64,
    /// `R − a_q·M_q`, in units of `S_y`.
    pub delta_r: f64,
    /// `S_y·(R − a_q·M)`, the total.
    pub eps_r: f64,
    /// `a_q·(M_q − M)` exactly, in units of `S_y`.
    pub mismatch_units: Dyadic,
    /// `δ_r` exactly.
    pub delta_units: Dyadic,
    /// The integer rescale result `R`.
    pub rescaled: i32,
}

impl RescaleError {
    /// `mismatch_units + delta_units`, exactly `R − a_q·M`.
    pub fn total_units(&self) -> Dyadic {
        self.mismatch_units + self.delta_units
    }
}

/// Splits the rescale error of `a_q` into its scale-mismatch and rounding
/// parts. Assumes no saturation.
pub fn rescale_error_decompose(a_q: i32, m_real: f64, r: &DyadicRescaler, s_y: f64) -> RescaleError {
    let m_exact = Dyadic::from_f64(m_real);
    let mq = Dyadic::from_rescaler(r);
    let rescaled = multiply_by_quantized_multiplier(a_q, r);
    let mismatch_units = (mq - m_exact).mul_int(a_q as i64);
    let delta_units = Dyadic::from_int(rescaled as i64) - mq.mul_int(a_q as i64);
    let total = mismatch_units + delta_units;
    RescaleError {
        mismatch: s_y * mismatch_units.to_f64(),
        delta_r: delta_units.to_f64(),
        eps_r: s_y * total.to_f64(),
        mismatch_units,
        delta_units,
        rescaled,
    }
}

/// `|M_q − M|·max|a_q| + 1/2`, exactly, in units of `S_y`.
pub fn rescale_error_bound_units(m_real: f64, r: &DyadicRescaler, max_abs_acc: i32) -> Dyadic {
    (Dyadic::from_rescaler(r) - Dyadic::from_f64(m_real))
        .abs()
        .mul_int((max_abs_acc as i64).abs())
        + Dyadic::half()
}

/// `|M_q − M|·S_y·max|a_q| + S_y/2`.
pub fn rescale_error_bound(m_real: f64, r: &DyadicRescaler, s_y: f64, max_abs_acc: i32) -> f64 {
    s_y * rescale_error_bound_units(m_real, r, max_abs_acc).to_f64()
}

/// Per-element realisation of the error terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub eps_a: f64,
    pub eps_y: f64,
    /// `eps_a − eps_y`.
    pub eps_r: f64,
    pub delta_r: f64,
}

/// Measures all error terms for a real value `a` (taken as both the true
/// accumulator and the true output, i.e. no activation) that was quantized
/// to accumulator `a_q` at scale `S_x·S_w`, then rescaled by `r`.
#[allow(clippy::too_many_arguments)]
pub fn error_stats(a: f64, a_q: i32, s_x: f64, s_w: f64, r: &DyadicRescaler, s_y: f64, lo: i32, hi: i32) -> ErrorStats {
    let eps_a = accumulator_error(a, a_q, s_x, s_w);
    let rescaled = multiply_by_quantized_multiplier(a_q, r);
    let eps_y = output_error(a, rescaled, s_y, lo, hi);
    let delta = Dyadic::from_int(rescaled as i64) - Dyadic::from_rescaler(r).mul_int(a_q as i64);
    ErrorStats {
        eps_a,
        eps_y,
        eps_r: eps_a - eps_y,
        delta_r: delta.to_f64(),
    }
}

/// Outcome of [`min_safe_bitwidth`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SafeBitwidth {
    pub bits: u32,
    /// False when even 32 bits leave the mismatch above half an output step.
    pub attained: bool,
}

/// `|M_q − M|·A ≤ 1/2`, decided exactly.
pub fn mismatch_within_rounding(m_real: f64, r: &DyadicRescaler, max_abs_acc: i32) -> bool {
    (Dyadic::from_rescaler(r) - Dyadic::from_f64(m_real))
        .abs()
        .mul_int((max_abs_acc as i64).abs())
        .cmp_exact(Dyadic::half())
        != Ordering::Greater
}

/// Smallest `k` whose scale mismatch stays below the rounding floor for
/// accumulators up to `max_abs_acc`.
pub fn min_safe_bitwidth(m_real: f64, max_abs_acc: i32) -> Result<SafeBitwidth> {
    for k in MIN_BITS..=MAX_BITS {
        let r = quantize_rescaler(m_real, k)?;
        if mismatch_within_rounding(m_real, &r, max_abs_acc) {
            return Ok(SafeBitwidth {
                bits: k,
                attained: true,
            });
        }
    }
    Ok(SafeBitwidth {
        bits: MAX_BITS,
        attained: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelError {
    pub channel: usize,
    pub real: f64,
    pub m: u32,
    pub s: u32,
    pub k: u32,
    /// `|M_q − M|`.
    pub mismatch: f64,
    /// Largest `|a_q|` seen on the probe data.
    pub max_abs_acc: i32,
    /// Largest `|a_q|` any int8 input could produce.
    pub analytic_max_abs_acc: i64,
    /// `|M_q − M|·S_y·max|a_q|`.
    pub mismatch_bound: f64,
    /// `S_y / 2`.
    pub rounding_floor: f64,
    pub safe: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerErrorReport {
    pub layer: usize,
    pub kind: LayerKind,
    pub channels: Vec<ChannelError>,
}

impl LayerErrorReport {
    pub fn all_safe(&self) -> bool {
        self.channels.iter().all(|c| c.safe)
    }
}

fn analytic_bounds(model: &ModelGraph, layer_id: usize) -> Result<Vec<i64>> {
    let layer = &model.layers[layer_id];
    let z = model.input_params(layer_id).zero_point as i64;
    let span = (127 - z).max(z + 128);
    match layer.kind {
        LayerKind::AvgPool => Ok(vec![(layer.window.0 * layer.window.1) as i64 * 128]),
        LayerKind::Flatten => Ok(Vec::new()),
        kind => {
            let w = layer.weights()?;
            let axis = kind.weight_channel_axis();
            let channels = w.shape[axis];
            let inner: usize = w.shape[axis + 1..].iter().product();
            let mut sums = vec![0i64; channels];
            for (i, &v) in w.data.iter().enumerate() {
                sums[(i / inner) % channels] += (v as i64).abs();
            }
            Ok(sums
                .iter()
                .zip(layer.bias()?)
                .map(|(s, &b)| s * span + (b as i64).abs())
                .collect())
        }
    }
}

/// Per-channel rescale error bounds of one layer at width `k`, with
/// accumulator magnitudes measured by integer forward passes over `probes`.
pub fn layer_error_report(model: &ModelGraph, layer_id: usize, probes: &[QTensor], k: u32) -> Result<LayerErrorReport> {
    if probes.is_empty() {
        return Err(Error::Domain("probe set is empty".into()));
    }
    let layer = model
        .layers
        .get(layer_id)
        .ok_or_else(|| Error::Domain(format!("model has no layer {layer_id}")))?;
    if !layer.kind.has_rescalers() {
        return Err(Error::Domain(format!(
            "layer {layer_id} ({:?}) has no rescalers",
            layer.kind
        )));
    }
    let model = crate::calibrate::materialize_rescalers(model, k)?;
    let channels = model.layers[layer_id].rescalers.len();
    let mut max_abs = vec![0i32; channels];
    for probe in probes {
        let traces = forward_traced(&model, probe)?;
        let acc = traces[layer_id].acc.as_ref().expect("rescaled layer has accumulators");
        for (i, &a) in acc.data.iter().enumerate() {
            let c = i % channels;
            max_abs[c] = max_abs[c].max(a.saturating_abs());
        }
    }
    let analytic = analytic_bounds(&model, layer_id)?;
    let layer = &model.layers[layer_id];
    let s_y = layer.output.scale;
    let channels = layer
        .rescalers
        .iter()
        .enumerate()
        .map(|(c, r)| {
            let mismatch = (r.quantized() - r.real_value).abs();
            ChannelError {
                channel: c,
                real: r.real_value,
                m: r.m,
                s: r.s,
                k: r.k,
                mismatch,
                max_abs_acc: max_abs[c],
                analytic_max_abs_acc: analytic[c],
                mismatch_bound: s_y * Dyadic::from_f64(mismatch).mul_int(max_abs[c] as i64).to_f64(),
                rounding_floor: s_y / 2.0,
                safe: mismatch_within_rounding(r.real_value, r, max_abs[c]),
            }
        })
        .collect();
    Ok(LayerErrorReport {
        layer: layer_id,
        kind: layer.kind,
        channels,
    })
}

/// Reports for every layer that rescales.
pub fn analyze_model(model: &ModelGraph, probes: &[QTensor], k: u32) -> Result<Vec<LayerErrorReport>> {
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.has_rescalers())
        .map(|(i, _)| layer_error_report(model, i, probes, k))
        .collect()
}
