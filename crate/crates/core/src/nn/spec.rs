use std::fmt;

use serde::{Deserialize, Serialize};

use crate::digest::fnv1a64;
use crate::error::{Error, Result};

/// One layer of a sequential model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense { inputs: usize, outputs: usize },
    /// Square kernel with `kernel / 2` zero padding.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Non-overlapping `size x size` average pooling.
    AvgPool { size: usize },
    /// `relu(x + conv(relu(conv(x))))` with two 3x3 same-size convolutions.
    Residual { channels: usize },
    Flatten,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Dense { inputs, outputs } => write!(f, "dense {inputs}->{outputs}"),
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => write!(f, "conv {in_channels}->{out_channels} k{kernel} s{stride}"),
            Layer::Relu => write!(f, "relu"),
            Layer::AvgPool { size } => write!(f, "avgpool {size}"),
            Layer::Residual { channels } => write!(f, "residual {channels}"),
            Layer::Flatten => write!(f, "flatten"),
        }
    }
}

impl Layer {
    /// Output sample shape (batch axis excluded) for the given input shape.
    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            Layer::Dense { inputs, outputs } => (input == [inputs]).then(|| vec![outputs]),
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let [c, h, w] = *input else { return None };
                if c != in_channels || kernel == 0 || kernel % 2 == 0 || !(1..=2).contains(&stride) {
                    return None;
                }
                let pad = kernel / 2;
                let oh = (h + 2 * pad).checked_sub(kernel)? / stride + 1;
                let ow = (w + 2 * pad).checked_sub(kernel)? / stride + 1;
                Some(vec![out_channels, oh, ow])
            }
            Layer::Relu => Some(input.to_vec()),
            Layer::AvgPool { size } => {
                let [c, h, w] = *input else { return None };
                (size > 0 && h % size == 0 && w % size == 0).then(|| vec![c, h / size, w / size])
            }
            Layer::Residual { channels } => {
                let [c, _, _] = *input else { return None };
                (c == channels).then(|| input.to_vec())
            }
            Layer::Flatten => Some(vec![input.iter().product()]),
        }
    }
}

/// Architecture of a sequential classifier over `[0, 1]` inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-sample input shape: `[channels, height, width]` or `[features]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Checks that consecutive layers compose and that the model ends in
    /// `num_classes` logits.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Shape(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).ok_or_else(|| match i {
                0 => Error::Shape(format!("input {:?} does not fit layer 0 ({layer})", self.input_shape)),
                _ => Error::Shape(format!(
                    "layer {} ({}) emits {:?} but layer {i} ({layer}) cannot consume it",
                    i - 1,
                    self.layers[i - 1],
                    shape
                )),
            })?;
        }
        if shape != [self.num_classes] {
            return Err(Error::Shape(format!(
                "model emits {shape:?}, expected [{}] logits",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Canonical serialization, used for digests and checkpoint headers.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }

    /// Fully connected network with relu between hidden layers.
    pub fn mlp(inputs: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = inputs;
        for &h in hidden {
            layers.push(Layer::Dense { inputs: prev, outputs: h });
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Dense {
            inputs: prev,
            outputs: num_classes,
        });
        Self {
            input_shape: vec![inputs],
            layers,
            num_classes,
        }
    }

    /// Two convolutions and two dense layers; the desk-scale student.
    pub fn student_cnn(input: [usize; 3], num_classes: usize) -> Self {
        let [c, h, w] = input;
        let (c1, c2, hidden) = (8, 16, 32);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        Self {
            input_shape: input.to_vec(),
            layers: vec![
                Layer::Conv {
                    in_channels: c,
                    out_channels: c1,
                    kernel: 3,
                    stride: 1,
                },
                Layer::Relu,
                Layer::Conv {
                    in_channels: c1,
                    out_channels: c2,
                    kernel: 3,
                    stride: 2,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense {
                    inputs: c2 * oh * ow,
                    outputs: hidden,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: hidden,
                    outputs: num_classes,
                },
            ],
            num_classes,
        }
    }

    /// Residual CNN teacher: stem conv, residual block, strided conv,
    /// residual block, two dense layers. `size` scales the width.
    pub fn teacher_cnn(input: [usize; 3], num_classes: usize, size: TeacherSize) -> Self {
        let [c, h, w] = input;
        let (c1, c2, hidden) = size.widths();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        Self {
            input_shape: input.to_vec(),
            layers: vec![
                Layer::Conv {
                    in_channels: c,
                    out_channels: c1,
                    kernel: 3,
                    stride: 1,
                },
                Layer::Relu,
                Layer::Residual { channels: c1 },
                Layer::Conv {
                    in_channels: c1,
                    out_channels: c2,
                    kernel: 3,
                    stride: 2,
                },
                Layer::Relu,
                Layer::Residual { channels: c2 },
                Layer::Flatten,
                Layer::Dense {
                    inputs: c2 * oh * ow,
                    outputs: hidden,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: hidden,
                    outputs: num_classes,
                },
            ],
            num_classes,
        }
    }
}

/// Width presets for [`ModelSpec::teacher_cnn`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSize {
    Small,
    Medium,
    Large,
}

impl TeacherSize {
    fn widths(self) -> (usize, usize, usize) {
        match self {
            TeacherSize::Small => (8, 16, 64),
            TeacherSize::Medium => (12, 24, 96),
            TeacherSize::Large => (16, 32, 128),
        }
    }
}
