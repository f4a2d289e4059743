//! Real-valued networks: the float baseline that post-training quantization
//! starts from.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Stage};
use crate::error::{Error, Result};
use crate::idx::Dataset;
use crate::kernels::argmax;
use crate::model::Activation;
use crate::ops::{pool_sum, pool_sum_backward};
use crate::trainer::{softmax_cross_entropy, EpochLog, TrainConfig};

/// Parameters of one layer; empty for pooling and flatten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatModel {
    pub arch: ArchSpec,
    pub layers: Vec<FloatLayer>,
    /// Test accuracy measured at the end of training, if any.
    pub test_accuracy: Option<f64>,
}

/// Values seen while running one item forward.
#[derive(Debug, Clone)]
pub struct FloatTrace {
    /// Input first, then each layer's output (after its activation).
    pub outputs: Vec<Vec<f64>>,
    /// Pre-activation values of weighted layers (empty otherwise).
    pub pre: Vec<Vec<f64>>,
}

impl FloatTrace {
    pub fn logits(&self) -> &[f64] {
        self.outputs.last().unwrap()
    }
}

pub fn activate(activation: Activation, v: f64) -> f64 {
    match activation {
        Activation::None => v,
        Activation::Relu => v.max(0.0),
        Activation::Relu6 => v.clamp(0.0, 6.0),
    }
}

fn activation_passes(activation: Activation, v: f64) -> bool {
    match activation {
        Activation::None => true,
        Activation::Relu => v > 0.0,
        Activation::Relu6 => v > 0.0 && v < 6.0,
    }
}

/// Pixels to real inputs in `[0, 1]`.
pub fn pixels_to_real(pixels: &[u8]) -> Vec<f64> {
    pixels.iter().map(|&p| p as f64 / 255.0).collect()
}

impl FloatModel {
    /// He-uniform weights, zero biases.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<FloatModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .stages()?
            .iter()
            .map(|stage| match stage {
                Stage::Linear(op, _) => {
                    let bound = (6.0 / op.fan_in() as f64).sqrt();
                    FloatLayer {
                        weights: (0..op.weight_len()).map(|_| rng.gen_range(-bound..bound)).collect(),
                        bias: vec![0.0; op.channels()],
                    }
                }
                _ => FloatLayer {
                    weights: Vec::new(),
                    bias: Vec::new(),
                },
            })
            .collect();
        Ok(FloatModel {
            arch: arch.clone(),
            layers,
            test_accuracy: None,
        })
    }

    fn check(&self, stages: &[Stage]) -> Result<()> {
        if stages.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter sets for {} layers",
                self.layers.len(),
                stages.len()
            )));
        }
        for (i, (stage, layer)) in stages.iter().zip(&self.layers).enumerate() {
            let ok = match stage {
                Stage::Linear(op, _) => layer.weights.len() == op.weight_len() && layer.bias.len() == op.channels(),
                _ => layer.weights.is_empty() && layer.bias.is_empty(),
            };
            if !ok {
                return Err(Error::Shape(format!("layer {i} parameters do not fit its op")));
            }
        }
        Ok(())
    }

    pub fn forward_traced(&self, stages: &[Stage], x: Vec<f64>) -> Result<FloatTrace> {
        let mut outputs = vec![x];
        let mut pre = Vec::with_capacity(stages.len());
        for (stage, layer) in stages.iter().zip(&self.layers) {
            let input = outputs.last().unwrap();
            match stage {
                Stage::Linear(op, activation) => {
                    let mut z = vec![0.0; op.output_len()];
                    op.forward(input, &layer.weights, &layer.bias, &mut z)?;
                    outputs.push(z.iter().map(|&v| activate(*activation, v)).collect());
                    pre.push(z);
                }
                Stage::Pool { input: shape, window } => {
                    let area = (window.0 * window.1) as f64;
                    let sums = pool_sum(input, *shape, *window)?;
                    outputs.push(sums.into_iter().map(|s| s / area).collect());
                    pre.push(Vec::new());
                }
                Stage::Flatten => {
                    outputs.push(input.clone());
                    pre.push(Vec::new());
                }
            }
        }
        Ok(FloatTrace { outputs, pre })
    }

    pub fn predict(&self, pixels: &[u8]) -> Result<usize> {
        let stages = self.arch.stages()?;
        Ok(argmax(self.forward_traced(&stages, pixels_to_real(pixels))?.logits()))
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let stages = self.arch.stages()?;
        self.check(&stages)?;
        let correct = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let trace = self.forward_traced(&stages, pixels_to_real(data.image(i)))?;
                Ok((argmax(trace.logits()) == data.labels[i] as usize) as usize)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / data.len().max(1) as f64)
    }

    /// Loss and parameter gradients for one labelled item.
    pub fn gradients(&self, stages: &[Stage], pixels: &[u8], label: usize) -> Result<(f64, Vec<FloatLayer>)> {
        let trace = self.forward_traced(stages, pixels_to_real(pixels))?;
        let (loss, mut g) = softmax_cross_entropy(trace.logits(), label);
        let mut grads: Vec<FloatLayer> = self
            .layers
            .iter()
            .map(|l| FloatLayer {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        for i in (0..stages.len()).rev() {
            let input = &trace.outputs[i];
            g = match &stages[i] {
                Stage::Linear(op, activation) => {
                    for (gv, &z) in g.iter_mut().zip(&trace.pre[i]) {
                        if !activation_passes(*activation, z) {
                            *gv = 0.0;
                        }
                    }
                    let mut gx = if i > 0 { Some(vec![0.0; input.len()]) } else { None };
                    let layer = &mut grads[i];
                    op.backward(
                        input,
                        &self.layers[i].weights,
                        &g,
                        gx.as_deref_mut(),
                        &mut layer.weights,
                        &mut layer.bias,
                    )?;
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                Stage::Pool { input: shape, window } => {
                    let area = (window.0 * window.1) as f64;
                    pool_sum_backward(&g, *shape, *window)
                        .into_iter()
                        .map(|v| v / area)
                        .collect()
                }
                Stage::Flatten => g,
            };
        }
        Ok((loss, grads))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec(self).expect("float model serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FloatModel> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let model: FloatModel = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(e.column() as u64, format!("float model JSON: {e}")))?;
        model.check(&model.arch.stages()?)?;
        Ok(model)
    }
}

/// Sums per-item gradients in item order, so the result does not depend
/// on how the items were scheduled.
fn reduce(parts: Vec<(f64, Vec<FloatLayer>)>) -> (f64, Vec<FloatLayer>) {
    let mut iter = parts.into_iter();
    let (mut loss, mut total) = iter.next().expect("non-empty batch");
    for (l, grads) in iter {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.weights.iter_mut().zip(&g.weights).for_each(|(a, b)| *a += b);
            acc.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b);
        }
    }
    (loss, total)
}

/// Trains `arch` from a seeded initialization with minibatch SGD over
/// cross-entropy. Returns the model (with its test accuracy, when a test
/// set is given) and one log line per epoch.
pub fn train_float(
    arch: &ArchSpec,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(FloatModel, Vec<EpochLog>)> {
    cfg.validate()?;
    if [train.rows, train.cols, 1] != arch.input_shape {
        return Err(Error::Shape(format!(
            "{}x{} images do not fit input {:?}",
            train.rows, train.cols, arch.input_shape
        )));
    }
    let stages = arch.stages()?;
    let mut model = FloatModel::init(arch, cfg.seed)?;
    let mut velocity: Vec<FloatLayer> = model.layers.clone();
    for v in &mut velocity {
        v.weights.fill(0.0);
        v.bias.fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts = batch
                .par_iter()
                .map(|&i| model.gradients(&stages, train.image(i), train.labels[i] as usize))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = reduce(parts);
            epoch_loss += loss;
            let scale = 1.0 / batch.len() as f64;
            for ((layer, v), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                let step = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
                    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *v = cfg.momentum * *v + g * scale;
                        *p -= cfg.learning_rate * *v;
                    }
                };
                step(&mut layer.weights, &mut v.weights, &g.weights);
                step(&mut layer.bias, &mut v.bias, &g.bias);
            }
        }
        let accuracy = match test {
            Some(test) => model.accuracy(test)?,
            None => f64::NAN,
        };
        logs.push(EpochLog {
            epoch,
            loss: epoch_loss / train.len().max(1) as f64,
            accuracy,
        });
    }
    if let Some(test) = test {
        model.test_accuracy = Some(model.accuracy(test)?);
    }
    Ok((model, logs))
}
