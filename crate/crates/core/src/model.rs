//! The quantized model graph: an ordered list of layers with int8 weights,
//! int32 biases, per-channel rescalers and output quantization parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Padding, Window};
use crate::qcore::{round_half_up, DyadicRescaler, QuantParams};
use crate::tensor::QTensor;

/// Largest number of MAC terms feeding one accumulator.
pub const MAX_MACS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Depthwise,
    AvgPool,
    Flatten,
}

impl LayerKind {
    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d | LayerKind::Depthwise)
    }

    pub fn has_rescalers(self) -> bool {
        self != LayerKind::Flatten
    }

    /// Axis of the output channel in the weight tensor.
    pub fn weight_channel_axis(self) -> usize {
        match self {
            LayerKind::Depthwise => 2,
            _ => 0,
        }
    }
}

/// Activation functions realised as saturation bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Relu6,
}

impl Activation {
    /// Saturation bounds on the output grid. ReLU clamps at the quantized
    /// zero (`Z_y`); ReLU6 additionally at `round(6 / S_y) + Z_y`.
    pub fn bounds(self, out: QuantParams) -> (i8, i8) {
        let zero = out.zero_point.clamp(-128, 127) as i8;
        match self {
            Activation::None => (i8::MIN, i8::MAX),
            Activation::Relu => (zero, i8::MAX),
            Activation::Relu6 => {
                let six = round_half_up(6.0 / out.scale) + out.zero_point as f64;
                (zero, six.clamp(-128.0, 127.0) as i8)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weights: Option<QTensor>,
    /// Symmetric int32 bias at scale `S_x · S_w[c]`.
    pub bias: Option<Vec<i32>>,
    pub activation: Activation,
    pub stride: (usize, usize),
    pub padding: Padding,
    /// Pooling window; unused by other kinds.
    pub window: (usize, usize),
    pub output: QuantParams,
    /// One per output channel for weighted layers, a single `1 / area` for pooling.
    pub rescalers: Vec<DyadicRescaler>,
}

impl LayerSpec {
    pub fn flatten(params: QuantParams) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Flatten,
            weights: None,
            bias: None,
            activation: Activation::None,
            stride: (1, 1),
            padding: Padding::Valid,
            window: (1, 1),
            output: params,
            rescalers: Vec::new(),
        }
    }

    pub fn weights(&self) -> Result<&QTensor> {
        self.weights
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{:?} layer has no weights", self.kind)))
    }

    pub fn bias(&self) -> Result<&[i32]> {
        self.bias
            .as_deref()
            .ok_or_else(|| Error::Shape(format!("{:?} layer has no bias", self.kind)))
    }

    pub fn clamp_bounds(&self) -> (i8, i8) {
        self.activation.bounds(self.output)
    }

    /// Output shape (without batch) for an input item of shape `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::Shape(format!("{what} expects an HWC input, got {input:?}"))),
            }
        };
        match self.kind {
            LayerKind::Dense => {
                let w = self.weights()?;
                let [features] = *input else {
                    return Err(Error::Shape(format!("dense layer expects a flat input, got {input:?}")));
                };
                if w.shape.len() != 2 || w.shape[1] != features {
                    return Err(Error::Shape(format!(
                        "dense weights {:?} do not match {features} input features",
                        w.shape
                    )));
                }
                Ok(vec![w.shape[0]])
            }
            LayerKind::Conv2d => {
                let (h, wd, c) = spatial("conv2d")?;
                let w = self.weights()?;
                if w.shape.len() != 4 || w.shape[3] != c {
                    return Err(Error::Shape(format!(
                        "conv weights {:?} do not match {c} input channels",
                        w.shape
                    )));
                }
                let win = Window::new((h, wd), (w.shape[1], w.shape[2]), self.stride, self.padding)?;
                let (oh, ow) = win.output();
                Ok(vec![oh, ow, w.shape[0]])
            }
            LayerKind::Depthwise => {
                let (h, wd, c) = spatial("depthwise")?;
                let w = self.weights()?;
                if w.shape.len() != 3 || w.shape[2] != c {
                    return Err(Error::Shape(format!(
                        "depthwise weights {:?} do not match {c} channels",
                        w.shape
                    )));
                }
                let win = Window::new((h, wd), (w.shape[0], w.shape[1]), self.stride, self.padding)?;
                let (oh, ow) = win.output();
                Ok(vec![oh, ow, c])
            }
            LayerKind::AvgPool => {
                let (h, wd, c) = spatial("avgpool")?;
                let (ph, pw) = self.window;
                if ph == 0 || pw == 0 || h % ph != 0 || wd % pw != 0 {
                    return Err(Error::Shape(format!(
                        "pool window {:?} does not divide {h}x{wd}",
                        self.window
                    )));
                }
                Ok(vec![h / ph, wd / pw, c])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// MAC terms per accumulator.
    pub fn mac_count(&self) -> usize {
        match (self.kind, &self.weights) {
            (LayerKind::Dense, Some(w)) => w.shape[1],
            (LayerKind::Conv2d, Some(w)) => w.shape[1] * w.shape[2] * w.shape[3],
            (LayerKind::Depthwise, Some(w)) => w.shape[0] * w.shape[1],
            (LayerKind::AvgPool, _) => self.window.0 * self.window.1,
            _ => 0,
        }
    }

    /// Output channels (rescaler count) of this layer.
    pub fn out_channels(&self) -> usize {
        match (self.kind, &self.weights) {
            (LayerKind::Dense | LayerKind::Conv2d, Some(w)) => w.shape[0],
            (LayerKind::Depthwise, Some(w)) => w.shape[2],
            (LayerKind::AvgPool, _) => 1,
            _ => 0,
        }
    }
}

/// An integer-only model: input parameters, ordered layers, and the
/// multiplicand width its rescalers were last materialized at.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    /// `[H, W, C]` of one input item.
    pub input_shape: Vec<usize>,
    pub input: QuantParams,
    pub layers: Vec<LayerSpec>,
    pub k: u32,
}

impl ModelGraph {
    /// Quantization parameters of the tensor feeding layer `index`.
    pub fn input_params(&self, index: usize) -> QuantParams {
        if index == 0 {
            self.input
        } else {
            self.layers[index - 1].output
        }
    }

    pub fn output_params(&self) -> QuantParams {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    /// Item shapes: the input followed by every layer output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap().iter().product())
    }

    /// Checks every structural invariant, including the accumulator
    /// no-overflow envelope `N·127·255 + |b| < 2^31`.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::Shape(format!(
                "input shape {:?} is not a non-empty HWC shape",
                self.input_shape
            )));
        }
        QuantParams::new(self.input.scale, self.input.zero_point)?;
        self.shapes()?;
        for (i, layer) in self.layers.iter().enumerate() {
            self.validate_layer(i, layer).map_err(|e| match e {
                Error::Shape(msg) => Error::Shape(format!("layer {i}: {msg}")),
                Error::Domain(msg) => Error::Domain(format!("layer {i}: {msg}")),
                Error::Overflow(msg) => Error::Overflow(format!("layer {i}: {msg}")),
                other => other,
            })?;
        }
        Ok(())
    }

    fn validate_layer(&self, i: usize, layer: &LayerSpec) -> Result<()> {
        QuantParams::new(layer.output.scale, layer.output.zero_point)?;
        let in_params = self.input_params(i);
        if layer.stride.0 == 0 || layer.stride.1 == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        if layer.kind.has_weights() {
            let w = layer.weights()?;
            let axis = layer.kind.weight_channel_axis();
            match &w.quant {
                crate::tensor::TensorQuant::PerChannel { axis: a, .. } if *a == axis => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "weights must be per-channel symmetric along axis {axis}"
                    )))
                }
            }
            let channels = layer.out_channels();
            let bias = layer.bias()?;
            if bias.len() != channels {
                return Err(Error::Shape(format!("{} biases for {channels} channels", bias.len())));
            }
            if layer.rescalers.len() != channels {
                return Err(Error::Shape(format!(
                    "{} rescalers for {channels} channels",
                    layer.rescalers.len()
                )));
            }
            let macs = layer.mac_count();
            if macs > MAX_MACS {
                return Err(Error::Overflow(format!("{macs} MAC terms exceed 2^16")));
            }
            let worst_bias = bias.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
            let envelope = macs as i64 * 127 * 255 + worst_bias;
            if envelope >= 1i64 << 31 {
                return Err(Error::Overflow(format!("accumulator envelope {envelope} reaches 2^31")));
            }
        } else if layer.weights.is_some() || layer.bias.is_some() {
            return Err(Error::Shape(format!("{:?} layer carries parameters", layer.kind)));
        }
        match layer.kind {
            LayerKind::AvgPool | LayerKind::Flatten => {
                if layer.output != in_params {
                    return Err(Error::Shape(format!(
                        "{:?} must keep its input quantization parameters",
                        layer.kind
                    )));
                }
                let expected = if layer.kind == LayerKind::AvgPool { 1 } else { 0 };
                if layer.rescalers.len() != expected {
                    return Err(Error::Shape(format!(
                        "{:?} layer needs {expected} rescalers, has {}",
                        layer.kind,
                        layer.rescalers.len()
                    )));
                }
                if layer.kind == LayerKind::Flatten && layer.activation != Activation::None {
                    return Err(Error::Shape("flatten cannot carry an activation".into()));
                }
            }
            _ => {}
        }
        for r in &layer.rescalers {
            r.validate()?;
            if r.k != self.k {
                return Err(Error::Domain(format!(
                    "rescaler materialized at k = {} in a k = {} model",
                    r.k, self.k
                )));
            }
        }
        Ok(())
    }

    /// Number of weighted layers.
    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.kind.has_weights())
    }
}
