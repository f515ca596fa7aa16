//! f64 evaluation of a model with substitutable weights, plus reverse-mode
//! gradients with respect to every weight and bias.

use super::ops::{self, ConvGeom, PoolGeom};
use super::{Layer, NetworkModel};
use crate::error::Result;
use crate::tensor::Tensor;

/// Weights and biases per layer (`None` for parameter-free layers).
#[derive(Debug, Clone)]
pub(crate) struct Params {
    pub weights: Vec<Option<Vec<f64>>>,
    pub biases: Vec<Option<Vec<f64>>>,
}

impl Params {
    pub fn from_model(model: &NetworkModel) -> Self {
        let weights = model
            .layers()
            .iter()
            .map(|l| l.weight().map(|w| w.data().iter().map(|&v| v as f64).collect()))
            .collect();
        Self {
            weights,
            biases: biases(model),
        }
    }
}

pub(crate) fn biases(model: &NetworkModel) -> Vec<Option<Vec<f64>>> {
    model
        .layers()
        .iter()
        .map(|l| l.bias().map(|b| b.iter().map(|&v| v as f64).collect()))
        .collect()
}

pub(crate) fn to_tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).expect("shape checked")
}

pub(crate) fn conv_geom(model: &NetworkModel, i: usize) -> ConvGeom {
    let Layer::Conv2d(c) = &model.layers()[i] else {
        panic!("layer {i} is not a convolution");
    };
    let s = model.layer_input_shape(i);
    let ws = c.weight.shape();
    ConvGeom {
        c: s[0],
        h: s[1],
        w: s[2],
        k: ws[0],
        kh: ws[2],
        kw: ws[3],
        stride: c.stride,
        pad: c.padding,
    }
}

pub(crate) fn pool_geom(model: &NetworkModel, i: usize) -> PoolGeom {
    let p = match &model.layers()[i] {
        Layer::MaxPool(p) | Layer::AvgPool(p) => *p,
        _ => panic!("layer {i} is not a pooling layer"),
    };
    let s = model.layer_input_shape(i);
    PoolGeom {
        c: s[0],
        h: s[1],
        w: s[2],
        window: p.window,
        stride: p.stride,
    }
}

/// Cached forward state for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// Input of every layer, after the hook.
    pub inputs: Vec<Vec<f64>>,
    pub pool_args: Vec<Option<Vec<usize>>>,
}

pub(crate) type Hook<'a> = dyn FnMut(usize, &mut [f64]) -> Result<()> + 'a;

pub(crate) fn no_hook(_: usize, _: &mut [f64]) -> Result<()> {
    Ok(())
}

/// Applies a parameter-free layer.
pub(crate) fn apply_unweighted(model: &NetworkModel, i: usize, x: Vec<f64>) -> (Vec<f64>, Option<Vec<usize>>) {
    match &model.layers()[i] {
        Layer::Relu => (x.into_iter().map(|v| v.max(0.0)).collect(), None),
        Layer::MaxPool(_) => {
            let (y, arg) = ops::maxpool(&x, &pool_geom(model, i));
            (y, Some(arg))
        }
        Layer::AvgPool(_) => (ops::avgpool(&x, &pool_geom(model, i)), None),
        Layer::Flatten => (x, None),
        Layer::Conv2d(_) | Layer::Linear(_) => unreachable!("weighted layer {i}"),
    }
}

/// Forward pass; `hook` may rewrite the input of each weighted layer
/// in place (activation quantization).
pub(crate) fn forward(
    model: &NetworkModel,
    params: &Params,
    input: Vec<f64>,
    hook: &mut Hook<'_>,
    keep: bool,
) -> Result<(Vec<f64>, Option<Trace>)> {
    let n = model.layers().len();
    let mut trace = keep.then(|| Trace {
        inputs: Vec::with_capacity(n),
        pool_args: Vec::with_capacity(n),
    });
    let mut x = input;
    for (i, layer) in model.layers().iter().enumerate() {
        if layer.is_weighted() {
            hook(i, &mut x)?;
        }
        let (y, arg) = match layer {
            Layer::Conv2d(_) => {
                let g = conv_geom(model, i);
                let w = params.weights[i].as_deref().expect("conv weight");
                (ops::conv2d(&x, w, params.biases[i].as_deref(), &g), None)
            }
            Layer::Linear(l) => {
                let w = params.weights[i].as_deref().expect("linear weight");
                let out = l.weight.shape()[0];
                (ops::linear(&x, w, params.biases[i].as_deref(), out), None)
            }
            _ => apply_unweighted(model, i, x.clone()),
        };
        if let Some(t) = trace.as_mut() {
            t.inputs.push(std::mem::take(&mut x));
            t.pool_args.push(arg);
        }
        x = y;
    }
    Ok((x, trace))
}

/// Parameter gradients of a scalar loss given `dL/d(output)`.
#[derive(Debug, Clone)]
pub(crate) struct Grads {
    pub weights: Vec<Option<Vec<f64>>>,
    pub biases: Vec<Option<Vec<f64>>>,
}

pub(crate) fn backward(model: &NetworkModel, params: &Params, trace: &Trace, gout: Vec<f64>) -> Grads {
    let n = model.layers().len();
    let mut weights = vec![None; n];
    let mut biases = vec![None; n];
    let mut g = gout;
    for i in (0..n).rev() {
        let x = &trace.inputs[i];
        g = match &model.layers()[i] {
            Layer::Conv2d(_) => {
                let w = params.weights[i].as_deref().unwrap();
                let (gx, gw, gb) = ops::conv2d_backward(x, w, &g, &conv_geom(model, i));
                weights[i] = Some(gw);
                biases[i] = Some(gb);
                gx
            }
            Layer::Linear(_) => {
                let w = params.weights[i].as_deref().unwrap();
                let (gx, gw, gb) = ops::linear_backward(x, w, &g);
                weights[i] = Some(gw);
                biases[i] = Some(gb);
                gx
            }
            Layer::Relu => g.iter().zip(x).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect(),
            Layer::MaxPool(_) => ops::maxpool_backward(&g, trace.pool_args[i].as_ref().unwrap(), x.len()),
            Layer::AvgPool(_) => ops::avgpool_backward(&g, &pool_geom(model, i)),
            Layer::Flatten => g,
        };
    }
    Grads { weights, biases }
}
