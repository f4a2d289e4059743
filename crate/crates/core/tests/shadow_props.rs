use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rescale_lab::arch::{desk_cnn_v1, random_quantized_model};
use rescale_lab::calibrate::materialize_rescalers;
use rescale_lab::cli::{parity_check, random_input_batch};
use rescale_lab::finetune::finetune;
use rescale_lab::geometry::Padding;
use rescale_lab::idx::Dataset;
use rescale_lab::model::{Activation, LayerKind, LayerSpec, ModelGraph};
use rescale_lab::qcore::{quantize_rescaler, QuantParams};
use rescale_lab::shadow::{EmulationMode, ShadowModel};
use rescale_lab::tensor::QTensor;
use rescale_lab::trainer::TrainConfig;

/// One dense layer behind a flatten, with a wide output grid.
fn dense_model(rng: &mut ChaCha8Rng, features: usize, outs: usize, k: u32) -> ModelGraph {
    let input = QuantParams::new(rng.gen_range(0.005..0.05), rng.gen_range(-30..30)).unwrap();
    let output = QuantParams::new(rng.gen_range(0.2..1.0), rng.gen_range(-10..10)).unwrap();
    let scales: Vec<f64> = (0..outs).map(|_| rng.gen_range(0.001..0.02)).collect();
    let rescalers = scales
        .iter()
        .map(|s| quantize_rescaler(input.scale * s / output.scale, k).unwrap())
        .collect();
    let dense = LayerSpec {
        kind: LayerKind::Dense,
        weights: Some(
            QTensor::weights(
                (0..features * outs).map(|_| rng.gen_range(-127..=127)).collect(),
                vec![outs, features],
                scales,
                0,
            )
            .unwrap(),
        ),
        bias: Some((0..outs).map(|_| rng.gen_range(-2000..2000)).collect()),
        activation: Activation::None,
        stride: (1, 1),
        padding: Padding::Valid,
        window: (1, 1),
        output,
        rescalers,
    };
    ModelGraph {
        name: "dense".into(),
        input_shape: vec![1, 1, features],
        input,
        layers: vec![LayerSpec::flatten(input), dense],
        k,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emulation_is_bit_exact_at_every_width(seed in any::<u64>(), k in 2u32..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_quantized_model(&desk_cnn_v1(), 32, &mut rng).unwrap();
        let report = parity_check(&model, k, 1, 2, seed).unwrap();
        prop_assert!(report.passed(), "{report:?}");
    }

    /// Upstream 1 on one output: the weight gradient is `M_q[c]·(x − Z_x)`,
    /// so the rescale node contributes exactly `M_q`.
    #[test]
    fn rescale_node_scales_the_gradient_by_m_q(seed in any::<u64>(), k in 2u32..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (features, outs) = (rng.gen_range(1..12), rng.gen_range(1..5));
        let model = dense_model(&mut rng, features, outs, k);
        let shadow = ShadowModel::from_model(&model).unwrap();
        let x = random_input_batch(&model, 1, &mut rng).unwrap();
        let batch = shadow.emulated_forward(&x, EmulationMode::Emulated).unwrap();
        let c = rng.gen_range(0..outs);
        let pre = batch.items[0].layers[1].pre_clamp[c];
        prop_assume!((-128.0..=127.0).contains(&pre));
        let mut upstream = vec![0.0; outs];
        upstream[c] = 1.0;
        let grads = shadow.ste_backward(&batch, &[upstream]).unwrap();
        let mq = model.layers[1].rescalers[c].quantized();
        let z = model.input.zero_point as f64;
        for i in 0..features {
            prop_assert_eq!(grads[1].weights[c * features + i], mq * (x.data[i] as f64 - z));
        }
        prop_assert_eq!(grads[1].bias[c], mq);
    }

    #[test]
    fn weights_inside_their_rounding_cell_change_nothing(seed in any::<u64>(), offset in -0.5f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_quantized_model(&desk_cnn_v1(), rng.gen_range(2..=32), &mut rng).unwrap();
        let x = random_input_batch(&model, 2, &mut rng).unwrap();
        let mut shadow = ShadowModel::from_model(&model).unwrap();
        let before = shadow.emulated_forward(&x, EmulationMode::Emulated).unwrap().outputs(model.output_params()).unwrap();
        let weighted: Vec<usize> = model.weighted_layers().map(|(i, _)| i).collect();
        let layer = weighted[rng.gen_range(0..weighted.len())];
        let w = rng.gen_range(0..shadow.layers[layer].weights.len());
        shadow.layers[layer].weights[w] += offset;
        let after = shadow.emulated_forward(&x, EmulationMode::Emulated).unwrap().outputs(model.output_params()).unwrap();
        prop_assert_eq!(before, after);
    }
}

fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        images: (0..n * 784).map(|_| rng.gen()).collect(),
        labels: (0..n).map(|_| rng.gen_range(0..10)).collect(),
        rows: 28,
        cols: 28,
    }
}

#[test]
fn finetuning_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let model = materialize_rescalers(&random_quantized_model(&desk_cnn_v1(), 32, &mut rng).unwrap(), 3).unwrap();
    let data = synthetic_digits(24, 1);
    let cfg = TrainConfig {
        learning_rate: 200.0,
        epochs: 2,
        batch_size: 5,
        seed: 17,
        ..TrainConfig::default()
    };
    let a = finetune(&model, &data, &data, &cfg, 3).unwrap();
    let b = finetune(&model, &data, &data, &cfg, 3).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.stats, b.stats);
    assert_eq!(format!("{:?}", a.logs), format!("{:?}", b.logs));
    assert!(a.stats.changed > 0, "learning rate too small to move any weight");
    assert_eq!(a.model.input, model.input);
    for (x, y) in a.model.layers.iter().zip(&model.layers) {
        assert_eq!((x.output, &x.rescalers), (y.output, &y.rescalers));
        assert_eq!(
            x.weights.as_ref().map(|w| &w.quant),
            y.weights.as_ref().map(|w| &w.quant)
        );
    }
    assert_eq!(a.model.k, 3);
}
