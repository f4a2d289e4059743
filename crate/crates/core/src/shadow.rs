//! Training-time replay of integer inference.
//!
//! A [`ShadowModel`] holds real-valued copies of the integer weights and
//! biases. Its forward pass replays every integer operation of the engine
//! in binary64 on fake-quantized parameters, so the outputs are the engine's
//! int8 values exactly; the backward pass is a clipped straight-through
//! estimator.
//!
//! The rescale `floor((acc·m + 2^(s−1)) / 2^s)` is evaluated with `m` split
//! into 16-bit limbs `m = mh·2^16 + ml`, which keeps every product below
//! `2^49` for any int32 accumulator and any `k ≤ 32`.

use rayon::prelude::*;

use crate::calibrate::{fake_quant_bias, fake_quant_weight};
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelGraph};
use crate::ops::{pool_sum, pool_sum_backward, LinearOp};
use crate::qcore::DyadicRescaler;
use crate::tensor::QTensor;
use crate::trainer::softmax_cross_entropy;

/// Largest magnitude binary64 represents every integer up to.
pub const EXACT_LIMIT: f64 = 9_007_199_254_740_992.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmulationMode {
    /// Bit-exact replay of the integer engine.
    Emulated,
    /// Rounding removed: raw shadow parameters, `acc · M_q` without floor.
    /// Smooth almost everywhere; used to check gradients.
    Surrogate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
enum QStage {
    Linear {
        op: LinearOp,
        z_in: f64,
        z_out: f64,
        lo: f64,
        hi: f64,
        rescalers: Vec<DyadicRescaler>,
    },
    Pool {
        shape: [usize; 3],
        window: (usize, usize),
        rescaler: DyadicRescaler,
    },
    Flatten,
}

#[derive(Debug, Clone)]
pub struct ShadowModel {
    /// Frozen quantization parameters and rescalers; its integers are the
    /// starting point only.
    pub base: ModelGraph,
    pub layers: Vec<ShadowLayer>,
    stages: Vec<QStage>,
}

/// Per-layer values kept for the backward pass of one item.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Linear layers: input minus its zero point; pooling: raw input.
    pub input: Vec<f64>,
    /// Rescaled values plus output zero point, before the clamp.
    pub pre_clamp: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ItemCache {
    pub layers: Vec<LayerCache>,
}

impl ItemCache {
    /// The item's final outputs (int8 values held as binary64).
    pub fn logits(&self) -> &[f64] {
        &self.layers.last().expect("non-empty model").output
    }
}

/// Result of a batched emulated forward pass.
#[derive(Debug, Clone)]
pub struct EmulatedBatch {
    pub items: Vec<ItemCache>,
}

impl EmulatedBatch {
    /// Final outputs as an int8 tensor, for comparison with the engine.
    pub fn outputs(&self, params: crate::qcore::QuantParams) -> Result<QTensor> {
        let per = self.items.first().map_or(0, |c| c.logits().len());
        let data = self
            .items
            .iter()
            .flat_map(|c| c.logits().iter().map(|&v| v as i8))
            .collect();
        QTensor::activation(data, vec![self.items.len(), per], params)
    }
}

/// `floor((acc·m + 2^(s−1)) / 2^s)` in binary64, exact for int32 `acc`.
pub fn emulate_rescale(acc: f64, r: &DyadicRescaler) -> f64 {
    let mh = (r.m >> 16) as f64;
    let ml = (r.m & 0xffff) as f64;
    let r = if r.s > 16 {
        let t = (r.s - 16) as i32;
        ((acc * mh + 2f64.powi(t - 1) + (acc * ml / 65536.0).floor()) / 2f64.powi(t)).floor()
    } else {
        let s = r.s as i32;
        acc * mh * 2f64.powi(16 - s) + ((acc * ml + 2f64.powi(s - 1)) / 2f64.powi(s)).floor()
    };
    r.clamp(i32::MIN as f64, i32::MAX as f64)
}

fn check_accumulators(acc: &[f64], layer: usize) -> Result<()> {
    for &a in acc {
        if a.abs() >= EXACT_LIMIT {
            return Err(Error::OverflowEnvelope(format!(
                "layer {layer}: intermediate {a:e} reaches 2^53"
            )));
        }
        if a < i32::MIN as f64 || a > i32::MAX as f64 {
            return Err(Error::Overflow(format!("layer {layer}: accumulator {a} exceeds int32")));
        }
    }
    Ok(())
}

impl ShadowModel {
    /// Casts the integer parameters straight to reals (no dequantization).
    pub fn from_model(model: &ModelGraph) -> Result<ShadowModel> {
        model.validate()?;
        let shapes = model.shapes()?;
        let mut stages = Vec::with_capacity(model.layers.len());
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let input = &shapes[i];
            let hwc = || -> [usize; 3] {
                match *input.as_slice() {
                    [h, w, c] => [h, w, c],
                    _ => [1, 1, input.iter().product()],
                }
            };
            let stage = match layer.kind {
                LayerKind::Flatten => QStage::Flatten,
                LayerKind::AvgPool => QStage::Pool {
                    shape: hwc(),
                    window: layer.window,
                    rescaler: layer.rescalers[0],
                },
                kind => {
                    let w = layer.weights()?;
                    let shape = hwc();
                    let op = match kind {
                        LayerKind::Dense => LinearOp::dense(w.shape[1], w.shape[0]),
                        LayerKind::Conv2d => {
                            LinearOp::conv2d(shape, w.shape[0], (w.shape[1], w.shape[2]), layer.stride, layer.padding)?
                        }
                        _ => LinearOp::depthwise(shape, (w.shape[0], w.shape[1]), layer.stride, layer.padding)?,
                    };
                    let (lo, hi) = layer.clamp_bounds();
                    QStage::Linear {
                        op,
                        z_in: model.input_params(i).zero_point as f64,
                        z_out: layer.output.zero_point as f64,
                        lo: lo as f64,
                        hi: hi as f64,
                        rescalers: layer.rescalers.clone(),
                    }
                }
            };
            stages.push(stage);
            layers.push(ShadowLayer {
                weights: layer
                    .weights
                    .as_ref()
                    .map_or(Vec::new(), |w| w.data.iter().map(|&v| v as f64).collect()),
                bias: layer
                    .bias
                    .as_ref()
                    .map_or(Vec::new(), |b| b.iter().map(|&v| v as f64).collect()),
            });
        }
        Ok(ShadowModel {
            base: model.clone(),
            layers,
            stages,
        })
    }

    pub fn k(&self) -> u32 {
        self.base.k
    }

    /// Runs one int8 item through the replayed graph.
    pub fn forward_item(&self, x: &[i8], mode: EmulationMode) -> Result<ItemCache> {
        let mut current: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut caches = Vec::with_capacity(self.stages.len());
        for (i, (stage, params)) in self.stages.iter().zip(&self.layers).enumerate() {
            let cache = match stage {
                QStage::Linear {
                    op,
                    z_in,
                    z_out,
                    lo,
                    hi,
                    rescalers,
                } => {
                    let input: Vec<f64> = current.iter().map(|v| v - z_in).collect();
                    let (w, b) = match mode {
                        EmulationMode::Emulated => (
                            params.weights.iter().map(|&v| fake_quant_weight(v)).collect(),
                            params.bias.iter().map(|&v| fake_quant_bias(v)).collect(),
                        ),
                        EmulationMode::Surrogate => (params.weights.clone(), params.bias.clone()),
                    };
                    let mut acc = vec![0.0; op.output_len()];
                    op.forward(&input, &w, &b, &mut acc)?;
                    if mode == EmulationMode::Emulated {
                        check_accumulators(&acc, i)?;
                    }
                    let channels = op.channels();
                    let pre_clamp: Vec<f64> = acc
                        .iter()
                        .enumerate()
                        .map(|(j, &a)| rescale(a, &rescalers[j % channels], mode) + z_out)
                        .collect();
                    let output = pre_clamp.iter().map(|v| v.clamp(*lo, *hi)).collect();
                    LayerCache {
                        input,
                        pre_clamp,
                        output,
                    }
                }
                QStage::Pool {
                    shape,
                    window,
                    rescaler,
                } => {
                    let sums = pool_sum(&current, *shape, *window)?;
                    let pre_clamp: Vec<f64> = sums.iter().map(|&a| rescale(a, rescaler, mode)).collect();
                    let output = pre_clamp.iter().map(|v| v.clamp(-128.0, 127.0)).collect();
                    LayerCache {
                        input: current.clone(),
                        pre_clamp,
                        output,
                    }
                }
                QStage::Flatten => LayerCache {
                    input: Vec::new(),
                    pre_clamp: Vec::new(),
                    output: current.clone(),
                },
            };
            current = cache.output.clone();
            caches.push(cache);
        }
        Ok(ItemCache { layers: caches })
    }

    /// Replays the integer engine on every item of `batch` (int8, on the
    /// model's input grid).
    pub fn emulated_forward(&self, batch: &QTensor, mode: EmulationMode) -> Result<EmulatedBatch> {
        if batch.params()? != self.base.input {
            return Err(Error::Domain("batch is not on the model's input grid".into()));
        }
        let items = (0..batch.batch())
            .into_par_iter()
            .map(|n| self.forward_item(batch.item(n), mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmulatedBatch { items })
    }

    fn zero_grads(&self) -> Vec<ShadowLayer> {
        self.layers
            .iter()
            .map(|l| ShadowLayer {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect()
    }

    /// Clipped-STE backward pass for one item, accumulating into `grads`.
    /// `upstream` is the gradient on the item's final integer outputs.
    pub fn backward_item(&self, cache: &ItemCache, upstream: &[f64], grads: &mut [ShadowLayer]) -> Result<()> {
        let mut g = upstream.to_vec();
        for i in (0..self.stages.len()).rev() {
            let lc = &cache.layers[i];
            g = match &self.stages[i] {
                QStage::Linear {
                    op, lo, hi, rescalers, ..
                } => {
                    let channels = op.channels();
                    // Saturation gate, then the rescale node's factor M_q.
                    for (j, gv) in g.iter_mut().enumerate() {
                        let v = lc.pre_clamp[j];
                        *gv = if v >= *lo && v <= *hi {
                            *gv * rescalers[j % channels].quantized()
                        } else {
                            0.0
                        };
                    }
                    let params = &self.layers[i];
                    let w: Vec<f64> = params.weights.iter().map(|&v| fake_quant_weight(v)).collect();
                    let mut gx = if i > 0 { Some(vec![0.0; lc.input.len()]) } else { None };
                    let mut gw = vec![0.0; w.len()];
                    op.backward(&lc.input, &w, &g, gx.as_deref_mut(), &mut gw, &mut grads[i].bias)?;
                    // Fake-quant node: gradient passes only inside the int8 range.
                    for ((acc, gv), &raw) in grads[i].weights.iter_mut().zip(&gw).zip(&params.weights) {
                        if (-128.0..=127.0).contains(&raw) {
                            *acc += gv;
                        }
                    }
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                QStage::Pool {
                    shape,
                    window,
                    rescaler,
                } => {
                    let mq = rescaler.quantized();
                    for (gv, &v) in g.iter_mut().zip(&lc.pre_clamp) {
                        *gv = if (-128.0..=127.0).contains(&v) { *gv * mq } else { 0.0 };
                    }
                    pool_sum_backward(&g, *shape, *window)
                }
                QStage::Flatten => g,
            };
        }
        Ok(())
    }

    /// Parameter gradients summed over the batch in item order.
    pub fn ste_backward(&self, batch: &EmulatedBatch, upstream: &[Vec<f64>]) -> Result<Vec<ShadowLayer>> {
        if upstream.len() != batch.items.len() {
            return Err(Error::Shape(format!(
                "{} upstream gradients for {} items",
                upstream.len(),
                batch.items.len()
            )));
        }
        let parts = batch
            .items
            .par_iter()
            .zip(upstream)
            .map(|(cache, g)| {
                let mut grads = self.zero_grads();
                self.backward_item(cache, g, &mut grads)?;
                Ok(grads)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = self.zero_grads();
        for part in parts {
            add_into(&mut total, &part);
        }
        Ok(total)
    }

    /// Cross-entropy on dequantized logits: returns the summed loss and,
    /// per item, the gradient on the integer logits `S_y·(p − onehot)`.
    pub fn loss_head(&self, batch: &EmulatedBatch, labels: &[u8]) -> (f64, Vec<Vec<f64>>) {
        let out = self.base.output_params();
        let mut loss = 0.0;
        let grads = batch
            .items
            .iter()
            .zip(labels)
            .map(|(cache, &label)| {
                let real: Vec<f64> = cache
                    .logits()
                    .iter()
                    .map(|&q| out.scale * (q - out.zero_point as f64))
                    .collect();
                let (l, g) = softmax_cross_entropy(&real, label as usize);
                loss += l;
                g.into_iter().map(|v| v * out.scale).collect()
            })
            .collect();
        (loss, grads)
    }
}

fn rescale(acc: f64, r: &DyadicRescaler, mode: EmulationMode) -> f64 {
    match mode {
        EmulationMode::Emulated => emulate_rescale(acc, r),
        EmulationMode::Surrogate => acc * r.quantized(),
    }
}

fn add_into(total: &mut [ShadowLayer], part: &[ShadowLayer]) {
    for (t, p) in total.iter_mut().zip(part) {
        t.weights.iter_mut().zip(&p.weights).for_each(|(a, b)| *a += b);
        t.bias.iter_mut().zip(&p.bias).for_each(|(a, b)| *a += b);
    }
}
