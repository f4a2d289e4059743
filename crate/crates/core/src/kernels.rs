//! Integer-only layer kernels. Every weighted kernel computes
//! `acc = Σ x_q·w_q + b_eff` in int32, where the effective bias folds the
//! input zero point in: `b_eff[c] = b_q[c] - Z_x·Σ_i w_q[c, i]`. Requantization
//! then rescales each channel with its own dyadic rescaler.

use crate::error::{Error, Result};
use crate::geometry::{Padding, Window};
use crate::model::{LayerKind, LayerSpec, ModelGraph};
use crate::qcore::{quantize_rescaler, requantize, DyadicRescaler, QuantParams};
use crate::tensor::{AccTensor, QTensor};

/// Folded bias, one int32 per output channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectiveBias(pub Vec<i32>);

/// Per-channel sums of a weight tensor along its channel axis.
fn channel_sums(w: &QTensor, axis: usize) -> Vec<i64> {
    let channels = w.shape[axis];
    let inner: usize = w.shape[axis + 1..].iter().product();
    let mut sums = vec![0i64; channels];
    for (i, &v) in w.data.iter().enumerate() {
        sums[(i / inner) % channels] += v as i64;
    }
    sums
}

/// `b_eff[c] = b_q[c] - z_in · Σ_i w_q[c, i]`, rejecting results outside int32.
pub fn compute_effective_bias(bias: &[i32], w: &QTensor, axis: usize, z_in: i32) -> Result<EffectiveBias> {
    let sums = channel_sums(w, axis);
    if sums.len() != bias.len() {
        return Err(Error::Shape(format!(
            "{} biases for {} weight channels",
            bias.len(),
            sums.len()
        )));
    }
    bias.iter()
        .zip(&sums)
        .enumerate()
        .map(|(c, (&b, &sum))| {
            let v = b as i64 - z_in as i64 * sum;
            i32::try_from(v).map_err(|_| Error::Overflow(format!("effective bias {v} of channel {c} exceeds int32")))
        })
        .collect::<Result<Vec<_>>>()
        .map(EffectiveBias)
}

fn hwc(x: &QTensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape.as_slice() {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::Shape(format!("expected an NHWC tensor, got {:?}", x.shape))),
    }
}

fn check_bias(b_eff: &EffectiveBias, channels: usize) -> Result<()> {
    if b_eff.0.len() != channels {
        return Err(Error::Shape(format!(
            "{} bias entries for {channels} output channels",
            b_eff.0.len()
        )));
    }
    Ok(())
}

/// `acc[n, c] = Σ_i x[n, i]·w[c, i] + b_eff[c]`.
pub fn dense_int(x: &QTensor, w: &QTensor, b_eff: &EffectiveBias) -> Result<AccTensor> {
    let (n, features) = match *x.shape.as_slice() {
        [n, f] => (n, f),
        _ => return Err(Error::Shape(format!("dense input must be [N, F], got {:?}", x.shape))),
    };
    let (outs, inner) = match *w.shape.as_slice() {
        [o, i] => (o, i),
        _ => return Err(Error::Shape(format!("dense weights must be [O, I], got {:?}", w.shape))),
    };
    if inner != features {
        return Err(Error::Shape(format!(
            "dense weights expect {inner} features, input has {features}"
        )));
    }
    check_bias(b_eff, outs)?;
    let mut data = Vec::with_capacity(n * outs);
    for item in x.data.chunks_exact(features) {
        for (row, &b) in w.data.chunks_exact(inner).zip(&b_eff.0) {
            let dot: i32 = item.iter().zip(row).map(|(&a, &b)| a as i32 * b as i32).sum();
            data.push(dot + b);
        }
    }
    Ok(AccTensor {
        data,
        shape: vec![n, outs],
    })
}

/// Cross-correlation with OHWI weights. SAME padding fills with the input
/// zero point, so padded taps contribute nothing once `b_eff` is applied.
pub fn conv2d_int(
    x: &QTensor,
    w: &QTensor,
    b_eff: &EffectiveBias,
    stride: (usize, usize),
    padding: Padding,
) -> Result<AccTensor> {
    let (n, h, wd, c) = hwc(x)?;
    let (outs, kh, kw, ci) = match *w.shape.as_slice() {
        [o, kh, kw, i] => (o, kh, kw, i),
        _ => return Err(Error::Shape(format!("conv weights must be OHWI, got {:?}", w.shape))),
    };
    if ci != c {
        return Err(Error::Shape(format!(
            "conv weights expect {ci} channels, input has {c}"
        )));
    }
    check_bias(b_eff, outs)?;
    let win = Window::new((h, wd), (kh, kw), stride, padding)?;
    let (oh, ow) = win.output();
    let pad = x.params()?.zero_point;
    let mut data = vec![0i32; n * oh * ow * outs];
    let mut out = data.chunks_exact_mut(outs);
    for item in 0..n {
        let src = x.item(item);
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = out.next().unwrap();
                for (o, slot) in acc.iter_mut().enumerate() {
                    let filter = &w.data[o * kh * kw * c..(o + 1) * kh * kw * c];
                    let mut sum = 0i32;
                    for ty in 0..kh {
                        let iy = win.rows.source(oy, ty);
                        for tx in 0..kw {
                            let taps = &filter[(ty * kw + tx) * c..(ty * kw + tx + 1) * c];
                            match (iy, win.cols.source(ox, tx)) {
                                (Some(iy), Some(ix)) => {
                                    let px = &src[(iy * wd + ix) * c..(iy * wd + ix + 1) * c];
                                    for (&a, &b) in px.iter().zip(taps) {
                                        sum += a as i32 * b as i32;
                                    }
                                }
                                _ => {
                                    for &b in taps {
                                        sum += pad * b as i32;
                                    }
                                }
                            }
                        }
                    }
                    *slot = sum + b_eff.0[o];
                }
            }
        }
    }
    Ok(AccTensor {
        data,
        shape: vec![n, oh, ow, outs],
    })
}

/// Depthwise convolution with `[KH, KW, C]` weights (depth multiplier 1).
pub fn depthwise_conv2d_int(
    x: &QTensor,
    w: &QTensor,
    b_eff: &EffectiveBias,
    stride: (usize, usize),
    padding: Padding,
) -> Result<AccTensor> {
    let (n, h, wd, c) = hwc(x)?;
    let (kh, kw, wc) = match *w.shape.as_slice() {
        [kh, kw, wc] => (kh, kw, wc),
        _ => {
            return Err(Error::Shape(format!(
                "depthwise weights must be [KH, KW, C], got {:?}",
                w.shape
            )))
        }
    };
    if wc != c {
        return Err(Error::Shape(format!(
            "depthwise weights expect {wc} channels, input has {c}"
        )));
    }
    check_bias(b_eff, c)?;
    let win = Window::new((h, wd), (kh, kw), stride, padding)?;
    let (oh, ow) = win.output();
    let pad = x.params()?.zero_point;
    let mut data = Vec::with_capacity(n * oh * ow * c);
    for item in 0..n {
        let src = x.item(item);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut sum = 0i32;
                    for ty in 0..kh {
                        let iy = win.rows.source(oy, ty);
                        for tx in 0..kw {
                            let tap = w.data[(ty * kw + tx) * c + ch] as i32;
                            let v = match (iy, win.cols.source(ox, tx)) {
                                (Some(iy), Some(ix)) => src[(iy * wd + ix) * c + ch] as i32,
                                _ => pad,
                            };
                            sum += v * tap;
                        }
                    }
                    data.push(sum + b_eff.0[ch]);
                }
            }
        }
    }
    Ok(AccTensor {
        data,
        shape: vec![n, oh, ow, c],
    })
}

/// Window sums of an average pool (the accumulators before `1 / area` rescaling).
pub fn avgpool_sums(x: &QTensor, window: (usize, usize)) -> Result<AccTensor> {
    let (n, h, wd, c) = hwc(x)?;
    let (ph, pw) = window;
    if ph == 0 || pw == 0 || h % ph != 0 || wd % pw != 0 {
        return Err(Error::Shape(format!("pool window {window:?} does not divide {h}x{wd}")));
    }
    let (oh, ow) = (h / ph, wd / pw);
    let mut data = Vec::with_capacity(n * oh * ow * c);
    for item in 0..n {
        let src = x.item(item);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut sum = 0i32;
                    for ty in 0..ph {
                        for tx in 0..pw {
                            sum += src[((oy * ph + ty) * wd + ox * pw + tx) * c + ch] as i32;
                        }
                    }
                    data.push(sum);
                }
            }
        }
    }
    Ok(AccTensor {
        data,
        shape: vec![n, oh, ow, c],
    })
}

/// The rescaler that turns a window sum into a mean.
pub fn pool_rescaler(window: (usize, usize), k: u32) -> Result<DyadicRescaler> {
    quantize_rescaler(1.0 / (window.0 * window.1) as f64, k)
}

/// Average pool in the integer domain; input and output share quantization
/// parameters, so the mean of the raw int8 values is the quantized mean.
pub fn avgpool_int(x: &QTensor, window: (usize, usize), k: u32) -> Result<QTensor> {
    avgpool_with(x, window, &pool_rescaler(window, k)?)
}

pub fn avgpool_with(x: &QTensor, window: (usize, usize), r: &DyadicRescaler) -> Result<QTensor> {
    let params = x.params()?;
    let sums = avgpool_sums(x, window)?;
    let data = sums
        .data
        .iter()
        .map(|&s| requantize(s, r, 0, i8::MIN, i8::MAX))
        .collect();
    QTensor::activation(data, sums.shape, params)
}

/// Accumulators of one layer (weighted kinds and pooling); `None` for flatten.
pub fn layer_accumulate(x: &QTensor, layer: &LayerSpec, z_in: i32) -> Result<Option<AccTensor>> {
    let acc = match layer.kind {
        LayerKind::Flatten => return Ok(None),
        LayerKind::AvgPool => avgpool_sums(x, layer.window)?,
        kind => {
            let w = layer.weights()?;
            let b_eff = compute_effective_bias(layer.bias()?, w, kind.weight_channel_axis(), z_in)?;
            match kind {
                LayerKind::Dense => dense_int(x, w, &b_eff)?,
                LayerKind::Conv2d => conv2d_int(x, w, &b_eff, layer.stride, layer.padding)?,
                _ => depthwise_conv2d_int(x, w, &b_eff, layer.stride, layer.padding)?,
            }
        }
    };
    Ok(Some(acc))
}

/// Per-channel requantization of an accumulator tensor into the layer's output grid.
pub fn requantize_layer(acc: &AccTensor, layer: &LayerSpec) -> Result<QTensor> {
    let (lo, hi) = match layer.kind {
        LayerKind::AvgPool => (i8::MIN, i8::MAX),
        _ => layer.clamp_bounds(),
    };
    let z_out = match layer.kind {
        LayerKind::AvgPool => 0,
        _ => layer.output.zero_point,
    };
    let channels = acc.channels();
    let rescalers = &layer.rescalers;
    let data = if rescalers.len() == 1 {
        acc.data
            .iter()
            .map(|&a| requantize(a, &rescalers[0], z_out, lo, hi))
            .collect()
    } else if rescalers.len() == channels {
        acc.data
            .iter()
            .enumerate()
            .map(|(i, &a)| requantize(a, &rescalers[i % channels], z_out, lo, hi))
            .collect()
    } else {
        return Err(Error::Shape(format!(
            "{} rescalers for {channels} channels",
            rescalers.len()
        )));
    };
    QTensor::activation(data, acc.shape.clone(), layer.output)
}

fn flatten(x: &QTensor) -> Result<QTensor> {
    let n = x.batch();
    QTensor::activation(x.data.clone(), vec![n, x.item_len()], x.params()?)
}

/// Runs one layer on int8 input: kernel, then per-channel requantize with the
/// layer's activation clamp. All rescalers must already be at width `k`.
pub fn layer_forward_int(x: &QTensor, layer: &LayerSpec, k: u32) -> Result<QTensor> {
    if let Some(r) = layer.rescalers.iter().find(|r| r.k != k) {
        return Err(Error::Domain(format!(
            "layer rescaler is at k = {}, engine runs at k = {k}",
            r.k
        )));
    }
    let z_in = x.params()?.zero_point;
    match layer_accumulate(x, layer, z_in)? {
        None => flatten(x),
        Some(acc) => requantize_layer(&acc, layer),
    }
}

/// Quantizes u8 images (`pixel / 255` real values) onto the model input grid.
pub fn quantize_pixels(pixels: &[u8], shape: Vec<usize>, params: QuantParams) -> Result<QTensor> {
    let data = pixels.iter().map(|&p| params.quantize(p as f64 / 255.0)).collect();
    QTensor::activation(data, shape, params)
}

/// One layer's intermediate results from [`forward_traced`].
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub acc: Option<AccTensor>,
    pub output: QTensor,
}

/// Full integer forward pass returning every layer's accumulators and output.
pub fn forward_traced(model: &ModelGraph, x: &QTensor) -> Result<Vec<LayerTrace>> {
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let input = traces.last().map_or(x, |t| &t.output);
        let z_in = input.params()?.zero_point;
        let acc = layer_accumulate(input, layer, z_in)?;
        let output = match &acc {
            None => flatten(input)?,
            Some(acc) => requantize_layer(acc, layer)?,
        };
        traces.push(LayerTrace { acc, output });
    }
    Ok(traces)
}

/// Integer-only inference: int8 input batch to int8 logits.
pub fn forward_int(model: &ModelGraph, x: &QTensor) -> Result<QTensor> {
    let mut current = x.clone();
    for layer in &model.layers {
        current = layer_forward_int(&current, layer, model.k)?;
    }
    Ok(current)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per batch item.
pub fn predict(model: &ModelGraph, x: &QTensor) -> Result<Vec<usize>> {
    let logits = forward_int(model, x)?;
    let classes = logits.item_len();
    Ok(logits.data.chunks_exact(classes).map(argmax).collect())
}
