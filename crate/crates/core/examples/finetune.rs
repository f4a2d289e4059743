//! Rescale-aware fine-tuning at a 2-bit rescaler width.
//!
//! Usage: `finetune [MODEL.rqm]`. Reads digits from `RESCALE_LAB_DATA` (default `data/mnist`).

use std::path::PathBuf;

use rescale_lab::arch::desk_cnn_v1;
use rescale_lab::calibrate::{materialize_rescalers, quantize_float_model};
use rescale_lab::cli::weight_change_report;
use rescale_lab::container::load_model;
use rescale_lab::finetune::{evaluate_accuracy, finetune};
use rescale_lab::float_net::train_float;
use rescale_lab::idx::load_digit_dir;
use rescale_lab::trainer::TrainConfig;

const K: u32 = 2;

fn main() -> rescale_lab::Result<()> {
    let dir = std::env::var_os("RESCALE_LAB_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| "data/mnist".into());
    let data = load_digit_dir(&dir)?;
    let model = match std::env::args().nth(1) {
        Some(path) => load_model(path)?,
        None => {
            let cfg = TrainConfig {
                epochs: 1,
                ..TrainConfig::float_baseline()
            };
            let (float, _) = train_float(&desk_cnn_v1(), &data.train.take(10_000), None, &cfg)?;
            quantize_float_model(&float, &[data.train.take(1000).images])?
        }
    };
    let test = data.test.take(2000);
    println!("k=32 accuracy {:.2}%", 100.0 * evaluate_accuracy(&model, &test)?);
    let narrow = materialize_rescalers(&model, K)?;
    println!("k={K} accuracy {:.2}%", 100.0 * evaluate_accuracy(&narrow, &test)?);

    let cfg = TrainConfig {
        learning_rate: 20.0,
        epochs: 1,
        ..TrainConfig::default()
    };
    let outcome = finetune(&narrow, &data.train.take(20_000), &test, &cfg, K)?;
    for log in &outcome.logs {
        println!(
            "epoch {}: loss {:.4}, accuracy {:.2}%",
            log.epoch,
            log.loss,
            100.0 * log.accuracy
        );
    }
    print!("{}", weight_change_report(&outcome.stats));
    Ok(())
}
