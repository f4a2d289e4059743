//! Network architectures and random quantized instances of them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Padding;
use crate::kernels::pool_rescaler;
use crate::model::{Activation, LayerKind, LayerSpec, ModelGraph};
use crate::ops::LinearOp;
use crate::qcore::{quantize_rescaler, QuantParams};
use crate::tensor::QTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchLayer {
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
    },
    Depthwise {
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
    },
    AvgPool {
        window: (usize, usize),
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
}

impl ArchLayer {
    pub fn kind(&self) -> LayerKind {
        match self {
            ArchLayer::Conv2d { .. } => LayerKind::Conv2d,
            ArchLayer::Depthwise { .. } => LayerKind::Depthwise,
            ArchLayer::AvgPool { .. } => LayerKind::AvgPool,
            ArchLayer::Flatten => LayerKind::Flatten,
            ArchLayer::Dense { .. } => LayerKind::Dense,
        }
    }

    pub fn activation(&self) -> Activation {
        match *self {
            ArchLayer::Conv2d { activation, .. }
            | ArchLayer::Depthwise { activation, .. }
            | ArchLayer::Dense { activation, .. } => activation,
            _ => Activation::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// `[H, W, C]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<ArchLayer>,
}

/// One step of an architecture resolved against its input shape.
#[derive(Debug, Clone)]
pub enum Stage {
    Linear(LinearOp, Activation),
    Pool { input: [usize; 3], window: (usize, usize) },
    Flatten,
}

impl ArchSpec {
    /// Resolves every layer to a concrete op, checking shapes along the way.
    pub fn stages(&self) -> Result<Vec<Stage>> {
        let mut shape = self.input_shape;
        let mut stages = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = |e: Error| Error::Shape(format!("layer {i}: {e}"));
            let stage = match *layer {
                ArchLayer::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => Stage::Linear(
                    LinearOp::conv2d(shape, filters, kernel, stride, padding).map_err(wrap)?,
                    activation,
                ),
                ArchLayer::Depthwise {
                    kernel,
                    stride,
                    padding,
                    activation,
                } => Stage::Linear(
                    LinearOp::depthwise(shape, kernel, stride, padding).map_err(wrap)?,
                    activation,
                ),
                ArchLayer::Dense { units, activation } => {
                    if shape[0] != 1 || shape[1] != 1 {
                        return Err(Error::Shape(format!(
                            "layer {i}: dense needs a flattened input, got {shape:?}"
                        )));
                    }
                    Stage::Linear(LinearOp::dense(shape[2], units), activation)
                }
                ArchLayer::AvgPool { window } => {
                    let (ph, pw) = window;
                    if ph == 0 || pw == 0 || !shape[0].is_multiple_of(ph) || !shape[1].is_multiple_of(pw) {
                        return Err(Error::Shape(format!(
                            "layer {i}: pool {window:?} does not divide {shape:?}"
                        )));
                    }
                    Stage::Pool { input: shape, window }
                }
                ArchLayer::Flatten => Stage::Flatten,
            };
            shape = match &stage {
                Stage::Linear(op, _) => op.output,
                Stage::Pool { input, window } => [input[0] / window.0, input[1] / window.1, input[2]],
                Stage::Flatten => [1, 1, shape.iter().product()],
            };
            stages.push(stage);
        }
        Ok(stages)
    }
}

/// The reference digit classifier: conv 3×3×8 → pool → depthwise 3×3 →
/// conv 1×1×16 → pool → dense 10, ReLU6 after every hidden weighted layer.
pub fn desk_cnn_v1() -> ArchSpec {
    let relu6 = Activation::Relu6;
    ArchSpec {
        name: "desk-cnn-v1".into(),
        input_shape: [28, 28, 1],
        layers: vec![
            ArchLayer::Conv2d {
                filters: 8,
                kernel: (3, 3),
                stride: (1, 1),
                padding: Padding::Same,
                activation: relu6,
            },
            ArchLayer::AvgPool { window: (2, 2) },
            ArchLayer::Depthwise {
                kernel: (3, 3),
                stride: (1, 1),
                padding: Padding::Same,
                activation: relu6,
            },
            ArchLayer::Conv2d {
                filters: 16,
                kernel: (1, 1),
                stride: (1, 1),
                padding: Padding::Same,
                activation: relu6,
            },
            ArchLayer::AvgPool { window: (2, 2) },
            ArchLayer::Flatten,
            ArchLayer::Dense {
                units: 10,
                activation: Activation::None,
            },
        ],
    }
}

/// Looks an architecture up by name.
pub fn arch_by_name(name: &str) -> Result<ArchSpec> {
    match name {
        "desk-cnn-v1" => Ok(desk_cnn_v1()),
        other => Err(Error::Domain(format!("unknown architecture {other:?}"))),
    }
}

fn random_params<R: Rng>(rng: &mut R) -> QuantParams {
    let scale = 2f64.powf(rng.gen_range(-8.0..0.0));
    QuantParams::new(scale, rng.gen_range(-128..=127)).unwrap()
}

/// A random integer model with the topology of `arch`, rescalers at width
/// `k`. Real rescale factors are drawn first (sized so outputs spread over
/// the int8 grid rather than saturating) and weight scales derived from
/// them, so every channel carries a distinct, arbitrary `M`.
pub fn random_quantized_model<R: Rng>(arch: &ArchSpec, k: u32, rng: &mut R) -> Result<ModelGraph> {
    let stages = arch.stages()?;
    let input = random_params(rng);
    let mut current = input;
    let mut layers = Vec::with_capacity(stages.len());
    for (stage, spec) in stages.iter().zip(&arch.layers) {
        let layer = match stage {
            Stage::Linear(op, activation) => {
                let output = random_params(rng);
                let shape = op.weight_shape();
                let len = op.weight_len();
                let channels = op.channels();
                let axis = spec.kind().weight_channel_axis();
                let data: Vec<i8> = (0..len).map(|_| rng.gen()).collect();
                let spread = (op.fan_in() as f64).sqrt() * 128.0 * 74.0;
                let mut scales = Vec::with_capacity(channels);
                let mut rescalers = Vec::with_capacity(channels);
                for _ in 0..channels {
                    let m_real = (60.0 / spread * 2f64.powf(rng.gen_range(-2.0..2.0))).min(1.0);
                    scales.push(m_real * output.scale / current.scale);
                    rescalers.push(quantize_rescaler(m_real, k)?);
                }
                let bias_span = (spread / 4.0) as i32;
                let bias = (0..channels).map(|_| rng.gen_range(-bias_span..=bias_span)).collect();
                current = output;
                LayerSpec {
                    kind: spec.kind(),
                    weights: Some(QTensor::weights(data, shape, scales, axis)?),
                    bias: Some(bias),
                    activation: *activation,
                    stride: stride_of(spec),
                    padding: padding_of(spec),
                    window: (1, 1),
                    output,
                    rescalers,
                }
            }
            Stage::Pool { window, .. } => LayerSpec {
                kind: LayerKind::AvgPool,
                weights: None,
                bias: None,
                activation: Activation::None,
                stride: *window,
                padding: Padding::Valid,
                window: *window,
                output: current,
                rescalers: vec![pool_rescaler(*window, k)?],
            },
            Stage::Flatten => LayerSpec::flatten(current),
        };
        layers.push(layer);
    }
    let model = ModelGraph {
        name: format!("{}-random", arch.name),
        input_shape: arch.input_shape.to_vec(),
        input,
        layers,
        k,
    };
    model.validate()?;
    Ok(model)
}

pub(crate) fn stride_of(layer: &ArchLayer) -> (usize, usize) {
    match *layer {
        ArchLayer::Conv2d { stride, .. } | ArchLayer::Depthwise { stride, .. } => stride,
        ArchLayer::AvgPool { window } => window,
        _ => (1, 1),
    }
}

pub(crate) fn padding_of(layer: &ArchLayer) -> Padding {
    match *layer {
        ArchLayer::Conv2d { padding, .. } | ArchLayer::Depthwise { padding, .. } => padding,
        _ => Padding::Valid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_shapes() {
        let arch = desk_cnn_v1();
        let stages = arch.stages().unwrap();
        let Stage::Linear(dense, _) = stages.last().unwrap() else {
            panic!()
        };
        assert_eq!(dense.input, [1, 1, 7 * 7 * 16]);
        assert_eq!(dense.output, [1, 1, 10]);
        assert_eq!(arch_by_name("desk-cnn-v1").unwrap(), arch);
        assert!(arch_by_name("resnet").is_err());
    }

    #[test]
    fn random_models_validate_at_every_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [2, 5, 8, 16, 32] {
            let model = random_quantized_model(&desk_cnn_v1(), k, &mut rng).unwrap();
            assert_eq!(model.k, k);
            assert_eq!(model.shapes().unwrap().last().unwrap(), &vec![10]);
        }
    }
}
