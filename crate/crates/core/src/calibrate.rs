//! Post-training quantization of a float model, rescaler materialization at
//! a chosen width, and re-deployment of fine-tuned weights.

use rayon::prelude::*;

use crate::arch::{padding_of, stride_of, Stage};
use crate::error::{Error, Result};
use crate::float_net::{pixels_to_real, FloatModel};
use crate::geometry::Padding;
use crate::kernels::pool_rescaler;
use crate::model::{Activation, LayerKind, LayerSpec, ModelGraph};
use crate::qcore::{quantize_rescaler, round_half_up, QuantParams, MAX_BITS};
use crate::shadow::ShadowModel;
use crate::tensor::QTensor;

/// Smallest activation scale; degenerate ranges are widened to it.
pub const MIN_ACTIVATION_SCALE: f64 = 1e-7;

/// Running `[min, max]` of one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const EMPTY: Range = Range {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    };

    pub fn observe(&mut self, values: &[f64]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    pub fn merge(self, other: Range) -> Range {
        Range {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

/// Observed ranges of the input and of every layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub input: Range,
    pub layers: Vec<Range>,
}

impl CalibrationStats {
    /// Runs every calibration image through the float model.
    pub fn collect(model: &FloatModel, batches: &[Vec<u8>]) -> Result<CalibrationStats> {
        let stages = model.arch.stages()?;
        let item: usize = model.arch.input_shape.iter().product();
        if batches.is_empty() || batches.iter().any(|b| b.is_empty()) {
            return Err(Error::Calibration(
                "need at least one non-empty calibration batch".into(),
            ));
        }
        if let Some(b) = batches.iter().find(|b| b.len() % item != 0) {
            return Err(Error::Shape(format!(
                "calibration batch of {} bytes is not a multiple of {item}",
                b.len()
            )));
        }
        let empty = CalibrationStats {
            input: Range::EMPTY,
            layers: vec![Range::EMPTY; stages.len()],
        };
        let merge = |mut a: CalibrationStats, b: CalibrationStats| {
            a.input = a.input.merge(b.input);
            for (x, y) in a.layers.iter_mut().zip(b.layers) {
                *x = x.merge(y);
            }
            a
        };
        // min/max is order-independent, so the parallel reduction is deterministic.
        batches
            .par_iter()
            .flat_map(|b| b.par_chunks(item))
            .map(|pixels| {
                let trace = model.forward_traced(&stages, pixels_to_real(pixels))?;
                let mut stats = empty.clone();
                stats.input.observe(&trace.outputs[0]);
                for (range, out) in stats.layers.iter_mut().zip(&trace.outputs[1..]) {
                    range.observe(out);
                }
                Ok(stats)
            })
            .try_reduce(|| empty.clone(), |a, b| Ok(merge(a, b)))
    }
}

/// Affine int8 parameters covering `range` (extended to include 0, so real
/// zero is exactly representable).
pub fn params_from_range(range: Range) -> Result<QuantParams> {
    if !range.min.is_finite() || !range.max.is_finite() || range.min > range.max {
        return Err(Error::Calibration(format!(
            "invalid range [{}, {}]",
            range.min, range.max
        )));
    }
    let (min, max) = (range.min.min(0.0), range.max.max(0.0));
    let scale = (max - min) / 255.0;
    if scale < MIN_ACTIVATION_SCALE {
        return QuantParams::new(MIN_ACTIVATION_SCALE, 0);
    }
    let zero_point = round_half_up(-128.0 - min / scale).clamp(-128.0, 127.0) as i32;
    QuantParams::new(scale, zero_point)
}

/// Per-channel symmetric weights: `S_w[c] = max|w_c| / 127`.
fn quantize_weights(values: &[f64], shape: Vec<usize>, axis: usize) -> Result<QTensor> {
    let channels = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let channel = |i: usize| (i / inner) % channels;
    let mut max_abs = vec![0.0f64; channels];
    for (i, &v) in values.iter().enumerate() {
        max_abs[channel(i)] = max_abs[channel(i)].max(v.abs());
    }
    // An all-zero channel quantizes to zeros under any scale; 1/127 keeps it valid.
    let scales: Vec<f64> = max_abs
        .iter()
        .map(|&m| if m > 0.0 { m / 127.0 } else { 1.0 / 127.0 })
        .collect();
    let data = values
        .iter()
        .enumerate()
        .map(|(i, &v)| round_half_up(v / scales[channel(i)]).clamp(-127.0, 127.0) as i8)
        .collect();
    QTensor::weights(data, shape, scales, axis)
}

fn round_to_i32(v: f64, what: impl FnOnce() -> String) -> Result<i32> {
    let r = round_half_up(v);
    if r >= i32::MIN as f64 && r <= i32::MAX as f64 {
        Ok(r as i32)
    } else {
        Err(Error::Calibration(format!("{} = {v:e} does not fit int32", what())))
    }
}

/// Post-training quantization: calibrates activation ranges on
/// `calibration_batches` (concatenated u8 images) and builds the integer
/// model with rescalers at full width.
pub fn quantize_float_model(model: &FloatModel, calibration_batches: &[Vec<u8>]) -> Result<ModelGraph> {
    let stats = CalibrationStats::collect(model, calibration_batches)?;
    let stages = model.arch.stages()?;
    let input = params_from_range(stats.input)?;
    let mut current = input;
    let mut layers = Vec::with_capacity(stages.len());
    for (i, ((stage, spec), params)) in stages.iter().zip(&model.arch.layers).zip(&model.layers).enumerate() {
        let layer = match stage {
            Stage::Linear(op, activation) => {
                let kind = spec.kind();
                let output = params_from_range(stats.layers[i])?;
                let w = quantize_weights(&params.weights, op.weight_shape(), kind.weight_channel_axis())?;
                let scales = w.channel_scales().expect("per-channel weights").to_vec();
                let mut bias = Vec::with_capacity(scales.len());
                let mut rescalers = Vec::with_capacity(scales.len());
                for (c, (&s_w, &b)) in scales.iter().zip(&params.bias).enumerate() {
                    let acc_scale = current.scale * s_w;
                    bias.push(round_to_i32(b / acc_scale, || format!("layer {i} channel {c} bias"))?);
                    let m = acc_scale / output.scale;
                    if m > 1.0 {
                        return Err(Error::Calibration(format!(
                            "layer {i} channel {c}: rescale factor {m} exceeds 1"
                        )));
                    }
                    rescalers.push(quantize_rescaler(m, MAX_BITS).map_err(|e| locate(e, i, c))?);
                }
                current = output;
                LayerSpec {
                    kind,
                    weights: Some(w),
                    bias: Some(bias),
                    activation: *activation,
                    stride: stride_of(spec),
                    padding: padding_of(spec),
                    window: (1, 1),
                    output,
                    rescalers,
                }
            }
            Stage::Pool { window, .. } => LayerSpec {
                kind: LayerKind::AvgPool,
                weights: None,
                bias: None,
                activation: Activation::None,
                stride: *window,
                padding: Padding::Valid,
                window: *window,
                output: current,
                rescalers: vec![pool_rescaler(*window, MAX_BITS)?],
            },
            Stage::Flatten => LayerSpec::flatten(current),
        };
        layers.push(layer);
    }
    let graph = ModelGraph {
        name: model.arch.name.clone(),
        input_shape: model.arch.input_shape.to_vec(),
        input,
        layers,
        k: MAX_BITS,
    };
    graph.validate()?;
    Ok(graph)
}

fn locate(e: Error, layer: usize, channel: usize) -> Error {
    match e {
        Error::RescalerUnderflow {
            value, shift, budget, ..
        } => Error::RescalerUnderflow {
            value,
            shift,
            budget,
            location: Some(format!("layer {layer} channel {channel}")),
        },
        other => other,
    }
}

/// Re-derives every rescaler at width `k` from its stored real factor.
pub fn materialize_rescalers(model: &ModelGraph, k: u32) -> Result<ModelGraph> {
    let mut out = model.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        for (c, r) in layer.rescalers.iter_mut().enumerate() {
            *r = quantize_rescaler(r.real_value, k).map_err(|e| locate(e, i, c))?;
        }
    }
    out.k = k;
    Ok(out)
}

/// Rounds the shadow's real weights and biases back onto the integer grid
/// (half-up; weights clamped to int8). Every quantization parameter and
/// rescaler is kept.
pub fn redeploy_weights(model: &ModelGraph, shadow: &ShadowModel) -> Result<ModelGraph> {
    if shadow.layers.len() != model.layers.len() {
        return Err(Error::Shape(format!(
            "shadow has {} layers, model {}",
            shadow.layers.len(),
            model.layers.len()
        )));
    }
    let mut out = model.clone();
    for (i, (layer, sh)) in out.layers.iter_mut().zip(&shadow.layers).enumerate() {
        if let Some(w) = layer.weights.as_mut() {
            if sh.weights.len() != w.data.len() {
                return Err(Error::Shape(format!("layer {i}: shadow weights do not match")));
            }
            for (q, &v) in w.data.iter_mut().zip(&sh.weights) {
                *q = fake_quant_weight(v) as i8;
            }
        }
        if let Some(b) = layer.bias.as_mut() {
            if sh.bias.len() != b.len() {
                return Err(Error::Shape(format!("layer {i}: shadow biases do not match")));
            }
            for (q, &v) in b.iter_mut().zip(&sh.bias) {
                *q = fake_quant_bias(v) as i32;
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// `round_half_up(clamp(w, −128, 127))`.
pub fn fake_quant_weight(w: f64) -> f64 {
    round_half_up(w.clamp(-128.0, 127.0))
}

pub fn fake_quant_bias(b: f64) -> f64 {
    round_half_up(b.clamp(i32::MIN as f64, i32::MAX as f64))
}
