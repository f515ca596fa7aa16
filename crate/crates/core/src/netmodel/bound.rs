//! Monte-Carlo check of the recursive output-error bound for linear-only nets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::engine::{self, Params};
use super::ops;
use super::quant::QuantizedModel;
use super::{Layer, NetworkModel};
use crate::error::{Error, Result};

/// Distribution of the i.i.d. zero-mean input entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InputDist {
    Gaussian { std: f64 },
    Uniform { half_width: f64 },
}

/// Squared output error after the weighted layer `layer`, measured and
/// bounded. Expectations are sample means of squared Frobenius norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub layer: usize,
    pub measured_e2: f64,
    pub bound_e2: f64,
}

/// `‖A‖²_F` of the dense operator the layer applies. For convolutions each
/// weight is counted once per output position where its tap is valid.
fn operator_norm2(model: &NetworkModel, i: usize, w: &[f64]) -> f64 {
    let sq: Vec<f64> = w.iter().map(|v| v * v).collect();
    match &model.layers()[i] {
        Layer::Conv2d(_) => {
            let g = engine::conv_geom(model, i);
            let ones = vec![1.0; g.c * g.h * g.w];
            ops::conv2d(&ones, &sq, None, &g).iter().sum()
        }
        _ => sq.iter().sum(),
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Measured `E‖Y_l − Ŷ_l‖²` after every weighted layer next to the bound
/// `e²_l = ‖Ŵ_l − W_l‖² E‖X_l‖² + ‖W_l‖² e²_{l−1}`, where `Ŷ` uses the
/// quantized weights of all layers up to `l` and full-precision inputs.
pub fn mse_bound_report(
    model: &NetworkModel,
    qmodel: &QuantizedModel,
    n_samples: usize,
    dist: InputDist,
    seed: u64,
) -> Result<Vec<BoundRow>> {
    if !model.same_topology(qmodel.base()) {
        return Err(Error::InvalidModel("quantized model topology differs".into()));
    }
    if let Some((i, l)) = model
        .layers()
        .iter()
        .enumerate()
        .find(|(_, l)| !matches!(l, Layer::Conv2d(_) | Layer::Linear(_) | Layer::Flatten))
    {
        return Err(Error::InvalidModel(format!(
            "layer {i} ({}) is not linear; the bound needs a linear-only net",
            l.kind().as_str()
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    let fp = Params::from_model(model);
    let q = qmodel.float_params();
    let weighted = model.weighted_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_in: usize = model.input_shape().iter().product();
    let sample = |rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        Ok(match dist {
            InputDist::Gaussian { std } => {
                let d = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..n_in).map(|_| d.sample(rng)).collect()
            }
            InputDist::Uniform { half_width } => {
                let d = Uniform::new_inclusive(-half_width, half_width)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..n_in).map(|_| d.sample(rng)).collect()
            }
        })
    };
    let mut e_x = vec![0.0; weighted.len()];
    let mut e_err = vec![0.0; weighted.len()];
    for _ in 0..n_samples {
        let x = sample(&mut rng)?;
        let (yf, tf) = engine::forward(model, &fp, x.clone(), &mut engine::no_hook, true)?;
        let (yq, tq) = engine::forward(model, &q, x, &mut engine::no_hook, true)?;
        let (tf, tq) = (tf.unwrap(), tq.unwrap());
        for (j, &i) in weighted.iter().enumerate() {
            e_x[j] += norm2(&tf.inputs[i]);
            // Error after layer i is the difference of the next layer's inputs.
            let (a, b) = match (tf.inputs.get(i + 1), tq.inputs.get(i + 1)) {
                (Some(a), Some(b)) => (a.as_slice(), b.as_slice()),
                _ => (yf.as_slice(), yq.as_slice()),
            };
            e_err[j] += a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        }
    }
    let n = n_samples as f64;
    let mut prev = 0.0;
    let mut rows = Vec::with_capacity(weighted.len());
    for (j, &i) in weighted.iter().enumerate() {
        let w = fp.weights[i].as_ref().unwrap();
        let wq = q.weights[i].as_ref().unwrap();
        let noise: Vec<f64> = wq.iter().zip(w).map(|(a, b)| a - b).collect();
        let bound = operator_norm2(model, i, &noise) * e_x[j] / n + operator_norm2(model, i, w) * prev;
        rows.push(BoundRow {
            layer: i,
            measured_e2: e_err[j] / n,
            bound_e2: bound,
        });
        prev = bound;
    }
    Ok(rows)
}
