//! Spatial bookkeeping shared by the integer kernels and the binary64 ops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output size and leading padding of one sliding-window axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axis {
    pub input: usize,
    pub kernel: usize,
    pub stride: usize,
    pub output: usize,
    pub pad_before: usize,
}

impl Axis {
    pub fn new(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Axis> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        let (output, pad_before) = match padding {
            Padding::Valid => {
                if input < kernel {
                    return Err(Error::Shape(format!(
                        "kernel {kernel} larger than input {input} with VALID padding"
                    )));
                }
                ((input - kernel) / stride + 1, 0)
            }
            Padding::Same => {
                let output = input.div_ceil(stride);
                let total = ((output - 1) * stride + kernel).saturating_sub(input);
                (output, total / 2)
            }
        };
        Ok(Axis {
            input,
            kernel,
            stride,
            output,
            pad_before,
        })
    }

    /// Input coordinate of tap `t` at output position `o`, or `None` inside the padding.
    #[inline]
    pub fn source(&self, o: usize, t: usize) -> Option<usize> {
        let pos = (o * self.stride + t).checked_sub(self.pad_before)?;
        (pos < self.input).then_some(pos)
    }
}

/// Both spatial axes of a convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub rows: Axis,
    pub cols: Axis,
}

impl Window {
    pub fn new(
        input: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Window> {
        Ok(Window {
            rows: Axis::new(input.0, kernel.0, stride.0, padding)?,
            cols: Axis::new(input.1, kernel.1, stride.1, padding)?,
        })
    }

    pub fn output(&self) -> (usize, usize) {
        (self.rows.output, self.cols.output)
    }
}
