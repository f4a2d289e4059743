//! Rescale-aware fine-tuning: SGD on the shadow model through the emulated
//! integer path, re-deployed to integers after every epoch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::calibrate::redeploy_weights;
use crate::error::{Error, Result};
use crate::idx::Dataset;
use crate::kernels::{predict, quantize_pixels};
use crate::model::ModelGraph;
use crate::shadow::{EmulationMode, ShadowModel};
use crate::tensor::QTensor;
use crate::trainer::{EpochLog, TrainConfig, TrainMode};

/// Images evaluated per engine call.
const EVAL_CHUNK: usize = 250;

/// Quantizes the images at `indices` onto the model's input grid.
pub fn quantize_items(model: &ModelGraph, data: &Dataset, indices: &[usize]) -> Result<(QTensor, Vec<u8>)> {
    let (pixels, labels) = data.gather(indices);
    let mut shape = vec![indices.len()];
    shape.extend(&model.input_shape);
    Ok((quantize_pixels(&pixels, shape, model.input)?, labels))
}

fn check_dataset(model: &ModelGraph, data: &Dataset) -> Result<()> {
    if model.input_shape != [data.rows, data.cols, 1] {
        return Err(Error::Shape(format!(
            "{}x{} images do not fit model input {:?}",
            data.rows, data.cols, model.input_shape
        )));
    }
    Ok(())
}

/// Fraction of `data` the integer engine classifies correctly.
pub fn evaluate_accuracy(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    check_dataset(model, data)?;
    if data.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let correct = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (x, labels) = quantize_items(model, data, chunk)?;
            let predicted = predict(model, &x)?;
            Ok(predicted
                .iter()
                .zip(&labels)
                .filter(|(p, l)| **p == **l as usize)
                .count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// How far re-deployed integer weights moved from the originals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightChangeStats {
    pub total: usize,
    pub changed: usize,
    /// `changed / total`.
    pub changed_ratio: f64,
    /// Mean `|Δ|` over changed weights, in integer steps (0 if none changed).
    pub mean_abs_diff: f64,
    /// Per weighted layer: nonzero `Δ` value to count.
    pub histograms: BTreeMap<usize, BTreeMap<i32, usize>>,
    pub layers_affected: usize,
    /// Biases whose integer value changed, reported apart from weights.
    pub biases_changed: usize,
}

pub fn weight_change_stats(original: &ModelGraph, retrained: &ModelGraph) -> Result<WeightChangeStats> {
    if original.layers.len() != retrained.layers.len() {
        return Err(Error::Shape("models have different layer counts".into()));
    }
    let mut total = 0;
    let mut abs_sum = 0u64;
    let mut histograms = BTreeMap::new();
    let mut biases_changed = 0;
    for (i, (a, b)) in original.layers.iter().zip(&retrained.layers).enumerate() {
        match (&a.weights, &b.weights) {
            (Some(wa), Some(wb)) if wa.shape == wb.shape => {
                total += wa.data.len();
                let mut hist = BTreeMap::new();
                for (&x, &y) in wa.data.iter().zip(&wb.data) {
                    let d = y as i32 - x as i32;
                    if d != 0 {
                        *hist.entry(d).or_insert(0) += 1;
                        abs_sum += d.unsigned_abs() as u64;
                    }
                }
                if !hist.is_empty() {
                    histograms.insert(i, hist);
                }
            }
            (None, None) => {}
            _ => return Err(Error::Shape(format!("layer {i}: weight shapes differ"))),
        }
        match (&a.bias, &b.bias) {
            (Some(ba), Some(bb)) if ba.len() == bb.len() => {
                biases_changed += ba.iter().zip(bb).filter(|(x, y)| x != y).count();
            }
            (None, None) => {}
            _ => return Err(Error::Shape(format!("layer {i}: bias lengths differ"))),
        }
    }
    let changed: usize = histograms.values().flat_map(|h| h.values()).sum();
    Ok(WeightChangeStats {
        total,
        changed,
        changed_ratio: if total == 0 { 0.0 } else { changed as f64 / total as f64 },
        mean_abs_diff: if changed == 0 {
            0.0
        } else {
            abs_sum as f64 / changed as f64
        },
        layers_affected: histograms.len(),
        histograms,
        biases_changed,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: ModelGraph,
    pub stats: WeightChangeStats,
    /// Training loss and integer test accuracy after each epoch.
    pub logs: Vec<EpochLog>,
}

/// Fine-tunes `model` (rescalers already at width `k`) through the emulated
/// integer path. Only weights and, if configured, biases move; every scale,
/// zero point and rescaler is left as it was.
pub fn finetune(
    model: &ModelGraph,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    k: u32,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if cfg.mode != TrainMode::FinetuneInt {
        return Err(Error::Domain("finetune needs a finetune-int configuration".into()));
    }
    if model.k != k || model.layers.iter().flat_map(|l| &l.rescalers).any(|r| r.k != k) {
        return Err(Error::Domain(format!(
            "model rescalers are not materialized at k = {k}"
        )));
    }
    check_dataset(model, train)?;
    let mut shadow = ShadowModel::from_model(model)?;
    let mut current = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = quantize_items(model, train, batch)?;
            let emulated = shadow.emulated_forward(&x, EmulationMode::Emulated)?;
            let (loss, upstream) = shadow.loss_head(&emulated, &labels);
            epoch_loss += loss;
            let grads = shadow.ste_backward(&emulated, &upstream)?;
            let step = cfg.learning_rate / batch.len() as f64;
            for (layer, g) in shadow.layers.iter_mut().zip(&grads) {
                for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                    *w -= step * gw;
                }
                if cfg.train_bias {
                    for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                        *b -= step * gb;
                    }
                }
            }
        }
        current = redeploy_weights(model, &shadow)?;
        logs.push(EpochLog {
            epoch,
            loss: epoch_loss / train.len().max(1) as f64,
            accuracy: evaluate_accuracy(&current, test)?,
        });
    }
    Ok(FinetuneOutcome {
        stats: weight_change_stats(model, &current)?,
        model: current,
        logs,
    })
}
