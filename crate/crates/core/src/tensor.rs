//! Int8 and int32 tensors. Activations are NHWC (or `[N, F]` after flatten);
//! conv weights are OHWI, depthwise weights `[KH, KW, C]`, dense weights `[O, I]`.

use crate::error::{Error, Result};
use crate::qcore::QuantParams;

/// Quantization of a tensor: one affine pair, or one symmetric scale per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorQuant {
    PerTensor(QuantParams),
    PerChannel { scales: Vec<f64>, axis: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub data: Vec<i8>,
    pub shape: Vec<usize>,
    pub quant: TensorQuant,
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl QTensor {
    pub fn new(data: Vec<i8>, shape: Vec<usize>, quant: TensorQuant) -> Result<Self> {
        if data.len() != element_count(&shape) {
            return Err(Error::Shape(format!(
                "{} elements do not fill shape {shape:?}",
                data.len()
            )));
        }
        if let TensorQuant::PerChannel { scales, axis } = &quant {
            let channels = shape
                .get(*axis)
                .copied()
                .ok_or_else(|| Error::Shape(format!("channel axis {axis} out of range for {shape:?}")))?;
            if scales.len() != channels {
                return Err(Error::Shape(format!(
                    "{} per-channel scales for {channels} channels",
                    scales.len()
                )));
            }
            for &s in scales {
                QuantParams::symmetric(s)?;
            }
        }
        Ok(QTensor { data, shape, quant })
    }

    pub fn activation(data: Vec<i8>, shape: Vec<usize>, params: QuantParams) -> Result<Self> {
        Self::new(data, shape, TensorQuant::PerTensor(params))
    }

    pub fn weights(data: Vec<i8>, shape: Vec<usize>, scales: Vec<f64>, axis: usize) -> Result<Self> {
        Self::new(data, shape, TensorQuant::PerChannel { scales, axis })
    }

    /// Per-tensor parameters; weights report an error.
    pub fn params(&self) -> Result<QuantParams> {
        match &self.quant {
            TensorQuant::PerTensor(p) => Ok(*p),
            TensorQuant::PerChannel { .. } => Err(Error::Shape("expected a per-tensor quantized activation".into())),
        }
    }

    pub fn channel_scales(&self) -> Option<&[f64]> {
        match &self.quant {
            TensorQuant::PerChannel { scales, .. } => Some(scales),
            TensorQuant::PerTensor(_) => None,
        }
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        element_count(&self.shape[1..])
    }

    pub fn item(&self, n: usize) -> &[i8] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }
}

/// Int32 accumulators at scale `S_x · S_w[c]` along the last axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccTensor {
    pub data: Vec<i32>,
    pub shape: Vec<usize>,
}

impl AccTensor {
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }
}
