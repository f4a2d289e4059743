use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rescale_lab::arch::{desk_cnn_v1, random_quantized_model};
use rescale_lab::calibrate::{materialize_rescalers, quantize_float_model};
use rescale_lab::container::{from_bytes, load_model, save_model, to_bytes};
use rescale_lab::finetune::quantize_items;
use rescale_lab::float_net::{train_float, FloatModel};
use rescale_lab::idx::{load_digit_dir, Dataset};
use rescale_lab::kernels::predict;
use rescale_lab::trainer::TrainConfig;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn container_round_trip(seed in any::<u64>(), k in 2u32..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_quantized_model(&desk_cnn_v1(), k, &mut rng).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let loaded = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&loaded, &model);
        prop_assert_eq!(to_bytes(&loaded).unwrap(), bytes);
    }

    #[test]
    fn any_prefix_is_rejected(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes = to_bytes(&random_quantized_model(&desk_cnn_v1(), 8, &mut rng).unwrap()).unwrap();
        let cut = (cut * bytes.len() as f64) as usize;
        let rejected = matches!(from_bytes(&bytes[..cut]), Err(rescale_lab::Error::Format { .. }));
        prop_assert!(rejected, "prefix of {} bytes accepted", cut);
    }
}

#[test]
fn files_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_quantized_model(&desk_cnn_v1(), 6, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rqm");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);
}

fn noise(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        images: (0..n * 784).map(|_| rng.gen()).collect(),
        labels: (0..n).map(|_| rng.gen_range(0..10)).collect(),
        rows: 28,
        cols: 28,
    }
}

#[test]
fn calibration_is_deterministic() {
    let float = FloatModel::init(&desk_cnn_v1(), 4).unwrap();
    let data = noise(60, 9);
    let batches: Vec<Vec<u8>> = data.images.chunks(20 * 784).map(<[u8]>::to_vec).collect();
    let a = quantize_float_model(&float, &batches).unwrap();
    let b = quantize_float_model(&float, &batches).unwrap();
    assert_eq!(a, b);
    assert_eq!(to_bytes(&a).unwrap(), to_bytes(&b).unwrap());
    let shuffled: Vec<Vec<u8>> = batches.iter().rev().cloned().collect();
    assert_eq!(
        quantize_float_model(&float, &shuffled).unwrap(),
        a,
        "min/max does not depend on order"
    );
}

fn data_dir() -> PathBuf {
    std::env::var_os("RESCALE_LAB_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Shortening the rescalers from 32 to 31 bits moves each output by at most
/// the rounding floor, which must not flip any test classification.
#[test]
fn no_flips_between_31_and_32_bits() {
    let Ok(digits) = load_digit_dir(data_dir()) else {
        eprintln!("digit data not found; skipping");
        return;
    };
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::float_baseline()
    };
    let (float, _) = train_float(&desk_cnn_v1(), &digits.train.take(3000), None, &cfg).unwrap();
    let calib = digits.train.take(500);
    let batches: Vec<Vec<u8>> = calib.images.chunks(100 * 784).map(<[u8]>::to_vec).collect();
    let at32 = quantize_float_model(&float, &batches).unwrap();
    let at31 = materialize_rescalers(&at32, 31).unwrap();
    let indices: Vec<usize> = (0..digits.test.len()).collect();
    let mut flips = 0;
    for chunk in indices.chunks(500) {
        let (x, _) = quantize_items(&at32, &digits.test, chunk).unwrap();
        let a = predict(&at32, &x).unwrap();
        let b = predict(&at31, &x).unwrap();
        flips += a.iter().zip(&b).filter(|(p, q)| p != q).count();
    }
    assert_eq!(flips, 0);
}
