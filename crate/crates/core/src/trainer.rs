//! Training configuration, the loss head and per-epoch logs shared by float
//! training and rescale-aware fine-tuning.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header line carried by every CSV this crate writes.
pub const CSV_VERSION_LINE: &str = "# rescale-lab v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    FinetuneInt,
    FloatBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Also train (and re-round) biases during fine-tuning.
    pub train_bias: bool,
}

impl Default for TrainConfig {
    /// Fine-tuning defaults: plain SGD at 0.01, two epochs, batches of 32.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 2,
            batch_size: 32,
            seed: 0,
            mode: TrainMode::FinetuneInt,
            momentum: 0.0,
            train_bias: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for training the float baseline.
    pub fn float_baseline() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            mode: TrainMode::FloatBaseline,
            momentum: 0.9,
            train_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Domain(format!(
                "learning rate {} must be finite and ≥ 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Softmax cross-entropy of `logits` against `label`; returns the loss and
/// `p − onehot`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub accuracy: f64,
}

/// CSV with the version line, then `epoch,loss,<accuracy_column>`.
pub fn epoch_log_csv(logs: &[EpochLog], accuracy_column: &str) -> String {
    let mut out = format!("{CSV_VERSION_LINE}\nepoch,loss,{accuracy_column}\n");
    for log in logs {
        writeln!(out, "{},{:.6},{:.6}", log.epoch, log.loss, log.accuracy).unwrap();
    }
    out
}
