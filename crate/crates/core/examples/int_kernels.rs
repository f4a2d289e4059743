//! Integer conv, depthwise conv, average pool and dense kernels on a tiny input.

use rescale_lab::geometry::Padding;
use rescale_lab::kernels::{
    avgpool_int, compute_effective_bias, conv2d_int, dense_int, depthwise_conv2d_int, requantize_layer,
};
use rescale_lab::model::{Activation, LayerKind, LayerSpec};
use rescale_lab::qcore::{quantize_rescaler, QuantParams};
use rescale_lab::tensor::QTensor;

fn main() -> rescale_lab::Result<()> {
    let input = QuantParams::new(1.0 / 255.0, -128)?;
    let x = QTensor::activation((0..16).map(|v| (v * 16 - 128) as i8).collect(), vec![1, 4, 4, 1], input)?;

    // Two 3x3 filters: an edge detector and a box blur.
    let edge = [-1, 0, 1, -2, 0, 2, -1, 0, 1];
    let blur = [14; 9];
    let w = QTensor::weights(
        edge.iter().chain(&blur).copied().collect(),
        vec![2, 3, 3, 1],
        vec![0.01, 0.01],
        0,
    )?;
    let b_eff = compute_effective_bias(&[0, 0], &w, 0, input.zero_point)?;
    let acc = conv2d_int(&x, &w, &b_eff, (1, 1), Padding::Same)?;
    println!("conv accumulators {:?}", acc.data);

    let out = QuantParams::new(0.02, -128)?;
    let rescalers = vec![quantize_rescaler(input.scale * 0.01 / out.scale, 8)?; 2];
    let layer = LayerSpec {
        kind: LayerKind::Conv2d,
        weights: Some(w),
        bias: Some(vec![0, 0]),
        activation: Activation::Relu6,
        stride: (1, 1),
        padding: Padding::Same,
        window: (1, 1),
        output: out,
        rescalers,
    };
    let y = requantize_layer(&acc, &layer)?;
    println!("conv int8 output  {:?}", y.data);

    let dw = QTensor::weights(
        vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 4, 0, 0, 0, 0],
        vec![3, 3, 2],
        vec![0.1, 0.1],
        2,
    )?;
    let dw_bias = compute_effective_bias(&[0, 0], &dw, 2, out.zero_point)?;
    let dw_acc = depthwise_conv2d_int(&y, &dw, &dw_bias, (1, 1), Padding::Same)?;
    println!("depthwise accs    {:?}", dw_acc.data);

    let pooled = avgpool_int(&y, (2, 2), 8)?;
    println!("avgpool 2x2       {:?}", pooled.data);

    let flat = QTensor::activation(pooled.data.clone(), vec![1, pooled.data.len()], out)?;
    let dense_w = QTensor::weights(
        (0..3 * flat.data.len()).map(|i| (i % 7) as i8 - 3).collect(),
        vec![3, flat.data.len()],
        vec![0.05; 3],
        0,
    )?;
    let dense_bias = compute_effective_bias(&[100, 0, -100], &dense_w, 0, out.zero_point)?;
    println!("dense accs        {:?}", dense_int(&flat, &dense_w, &dense_bias)?.data);
    Ok(())
}
