//! Accuracy of one quantized model as the rescaler width shrinks.
//!
//! Usage: `bitwidth_sweep [MODEL.rqm]`. Without a model file a short float
//! run is quantized first. Reads digits from `RESCALE_LAB_DATA` (default `data/mnist`).

use std::path::PathBuf;

use rescale_lab::arch::desk_cnn_v1;
use rescale_lab::calibrate::quantize_float_model;
use rescale_lab::cli::{sweep, sweep_csv, DEFAULT_THRESHOLD};
use rescale_lab::container::load_model;
use rescale_lab::float_net::train_float;
use rescale_lab::idx::load_digit_dir;
use rescale_lab::trainer::TrainConfig;

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
            let calib = data.train.take(1000);
            quantize_float_model(&float, &[calib.images])?
        }
    };
    let test = data.test.take(2000);
    let result = sweep(&model, &test, &[32, 16, 8, 6, 5, 4, 3, 2], DEFAULT_THRESHOLD)?;
    print!("{}", sweep_csv(&result));
    println!("degradation point: {:?}", result.degradation_point);
    Ok(())
}
