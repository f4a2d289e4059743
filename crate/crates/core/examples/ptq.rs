//! Train a small float baseline, quantize it after training, and compare accuracy.
//!
//! Reads the digit files from `RESCALE_LAB_DATA` (default `data/mnist`).

use std::path::PathBuf;

use rescale_lab::arch::desk_cnn_v1;
use rescale_lab::calibrate::quantize_float_model;
use rescale_lab::finetune::evaluate_accuracy;
use rescale_lab::float_net::train_float;
use rescale_lab::idx::load_digit_dir;
use rescale_lab::trainer::TrainConfig;

fn main() -> rescale_lab::Result<()> {
    let dir = std::env::var_os("RESCALE_LAB_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| "data/mnist".into());
    let data = load_digit_dir(&dir)?;
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::float_baseline()
    };
    let (float, _) = train_float(&desk_cnn_v1(), &data.train.take(10_000), Some(&data.test), &cfg)?;
    println!(
        "float accuracy   {:.2}%",
        100.0 * float.test_accuracy.unwrap_or(f64::NAN)
    );

    let calib = data.train.take(1000);
    let batches: Vec<Vec<u8>> = calib
        .images
        .chunks(100 * calib.image_len())
        .map(<[u8]>::to_vec)
        .collect();
    let model = quantize_float_model(&float, &batches)?;
    println!(
        "integer accuracy {:.2}%",
        100.0 * evaluate_accuracy(&model, &data.test)?
    );
    for (i, layer) in model.layers.iter().enumerate() {
        println!(
            "layer {i} {:?}: S_y={:.5} Z_y={}",
            layer.kind, layer.output.scale, layer.output.zero_point
        );
    }
    Ok(())
}
