//! Sequential conv nets: topology, full-precision forward pass, and the
//! quantized model built on top of it.

mod bound;
pub(crate) mod engine;
pub(crate) mod ops;
mod quant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use bound::{mse_bound_report, BoundRow, InputDist};
pub use quant::{
    compression_breakdown, compression_ratio, forward_quant, forward_quant_batch, quantize_weights, ActQuant,
    ActivationPlan, CompressionRow, ForwardMode, LayerQuantPlan, Partitioning, QuantizedModel, WeightQuantConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[K, C, KH, KW]`.
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[OUT, IN]`.
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    Relu,
    MaxPool(Pool),
    AvgPool(Pool),
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Linear,
    Relu,
    MaxPool,
    AvgPool,
    Flatten,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Flatten => "flatten",
        }
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::AvgPool(_) => LayerKind::AvgPool,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    /// Conv and linear layers carry weights.
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Linear(_))
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.weight),
            Layer::Linear(l) => Some(&mut l.weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[f32]> {
        match self {
            Layer::Conv2d(c) => c.bias.as_deref(),
            Layer::Linear(l) => l.bias.as_deref(),
            _ => None,
        }
    }

    /// Output channels of conv layers, output features of linear layers.
    pub fn kernel_count(&self) -> usize {
        self.weight().map_or(0, |w| w.shape()[0])
    }

    fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        let bad = |msg: String| Error::InvalidModel(format!("layer {index}: {msg}"));
        match self {
            Layer::Conv2d(c) => {
                let ws = c.weight.shape();
                if ws.len() != 4 {
                    return Err(bad(format!("conv weight must be 4-D, got {ws:?}")));
                }
                if input.len() != 3 || input[0] != ws[1] {
                    return Err(bad(format!("input {input:?} does not match weight {ws:?}")));
                }
                if c.stride == 0 {
                    return Err(bad("stride must be positive".into()));
                }
                check_bias(&c.bias, ws[0]).map_err(bad)?;
                let (h, w) = (input[1] + 2 * c.padding, input[2] + 2 * c.padding);
                if h < ws[2] || w < ws[3] {
                    return Err(bad(format!("kernel {ws:?} larger than padded input {input:?}")));
                }
                Ok(vec![ws[0], (h - ws[2]) / c.stride + 1, (w - ws[3]) / c.stride + 1])
            }
            Layer::Linear(l) => {
                let ws = l.weight.shape();
                if ws.len() != 2 {
                    return Err(bad(format!("linear weight must be 2-D, got {ws:?}")));
                }
                if input.len() != 1 || input[0] != ws[1] {
                    return Err(bad(format!("input {input:?} does not match weight {ws:?}")));
                }
                check_bias(&l.bias, ws[0]).map_err(bad)?;
                Ok(vec![ws[0]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool(p) | Layer::AvgPool(p) => {
                if input.len() != 3 {
                    return Err(bad(format!("pooling needs [C, H, W] input, got {input:?}")));
                }
                if p.window == 0 || p.stride == 0 || p.window > input[1] || p.window > input[2] {
                    return Err(bad(format!("pool {p:?} does not fit input {input:?}")));
                }
                Ok(vec![
                    input[0],
                    (input[1] - p.window) / p.stride + 1,
                    (input[2] - p.window) / p.stride + 1,
                ])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn check_bias(bias: &Option<Vec<f32>>, k: usize) -> std::result::Result<(), String> {
    match bias {
        Some(b) if b.len() != k => Err(format!("bias has {} entries for {k} kernels", b.len())),
        Some(b) if b.iter().any(|v| !v.is_finite()) => Err("non-finite bias".into()),
        _ => Ok(()),
    }
}

/// Ordered layers plus the per-sample input shape. Shapes are checked
/// end to end on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the
    /// output shape.
    shapes: Vec<Vec<usize>>,
}

impl NetworkModel {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!("bad input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            if let Some(w) = layer.weight() {
                w.check_finite()
                    .map_err(|e| Error::InvalidModel(format!("layer {i}: {e}")))?;
            }
            let next = layer.output_shape(shapes.last().unwrap(), i)?;
            shapes.push(next);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Output shape of layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i + 1]
    }

    /// Indices of conv and linear layers.
    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_weighted())
            .collect()
    }

    /// Copy with the weight of every weighted layer replaced by `f(index,
    /// layer)`. Shapes must be preserved.
    pub fn map_weights(&self, mut f: impl FnMut(usize, &Layer) -> Result<Tensor>) -> Result<Self> {
        let mut layers = self.layers.clone();
        for (i, layer) in layers.iter_mut().enumerate() {
            if layer.is_weighted() {
                let w = f(i, &self.layers[i])?;
                let slot = layer.weight_mut().unwrap();
                if w.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch {
                        left: slot.shape().to_vec(),
                        right: w.shape().to_vec(),
                    });
                }
                *slot = w;
            }
        }
        Self::new(self.input_shape.clone(), layers)
    }

    /// Same layer kinds, geometry and weight shapes.
    pub fn same_topology(&self, other: &NetworkModel) -> bool {
        self.input_shape == other.input_shape
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.kind() == b.kind()
                    && a.weight().map(|w| w.shape()) == b.weight().map(|w| w.shape())
                    && match (a, b) {
                        (Layer::Conv2d(x), Layer::Conv2d(y)) => x.stride == y.stride && x.padding == y.padding,
                        (Layer::MaxPool(x), Layer::MaxPool(y)) | (Layer::AvgPool(x), Layer::AvgPool(y)) => x == y,
                        _ => true,
                    }
            })
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                left: self.input_shape.clone(),
                right: x.shape().to_vec(),
            });
        }
        x.check_finite()
    }
}

/// Output of a full-precision forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub output: Tensor,
    /// Input activation of every layer, when captured.
    pub activations: Option<Vec<Tensor>>,
}

/// Full-precision forward pass of one sample, accumulated in f64.
pub fn forward_fp(model: &NetworkModel, x: &Tensor, capture: bool) -> Result<ForwardOutput> {
    model.check_input(x)?;
    let params = engine::Params::from_model(model);
    let input = x.data().iter().map(|&v| v as f64).collect();
    let (out, trace) = engine::forward(model, &params, input, &mut engine::no_hook, capture)?;
    let activations = trace.map(|t| {
        t.inputs
            .into_iter()
            .enumerate()
            .map(|(i, v)| engine::to_tensor(model.layer_input_shape(i), &v))
            .collect()
    });
    Ok(ForwardOutput {
        output: engine::to_tensor(model.output_shape(), &out),
        activations,
    })
}
