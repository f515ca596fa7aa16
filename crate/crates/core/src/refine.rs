//! Data-driven refinement of the per-kernel rescale factors γ.
//!
//! The objective is `Σ_i ‖f(X_i, W) − f(X_i, Ŵ(γ))‖²` over the calibration
//! inputs, with full-precision activations and `Ŵ(γ) = Σ_t γ α_t W̃_t + δ_t`
//! for every weight group. Integers, α and δ stay fixed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::engine::{self, Params, Trace};
use crate::netmodel::{Layer, NetworkModel, QuantizedModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { momentum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Number of calibration inputs used (the first `calib_size`).
    pub calib_size: usize,
    /// Seed of the mini-batch shuffling.
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::Sgd,
            calib_size: 500,
            seed: 0,
        }
    }
}

impl RefineConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.calib_size == 0 {
            return Err(Error::InvalidArgument(
                "batch and calibration sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    /// Objective before training and after every epoch.
    pub objective: Vec<f64>,
    /// Final γ statistics per weighted layer.
    pub gamma: Vec<GammaStats>,
}

/// γ of every weighted layer, concatenated in layer order, with the
/// per-element sensitivities `∂W/∂γ`.
struct GammaLayout {
    /// `(layer, offset into the flat γ vector, group count)`.
    layers: Vec<(usize, usize, usize)>,
    sens: Vec<Option<Vec<f64>>>,
    len: usize,
}

impl GammaLayout {
    fn new(q: &QuantizedModel) -> Self {
        let mut layers = Vec::new();
        let mut sens = vec![None; q.plans().len()];
        let mut off = 0;
        for (i, p) in q.weighted_plans() {
            layers.push((i, off, p.weight_terms.len()));
            sens[i] = Some(p.gamma_sensitivity());
            off += p.weight_terms.len();
        }
        Self { layers, sens, len: off }
    }

    fn get(&self, q: &QuantizedModel) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.len);
        for &(i, _, _) in &self.layers {
            g.extend(q.plan(i).unwrap().gammas());
        }
        g
    }

    fn set(&self, q: &mut QuantizedModel, g: &[f64]) {
        for &(i, off, n) in &self.layers {
            q.plans_mut()[i].as_mut().unwrap().set_gammas(&g[off..off + n]);
        }
    }

    /// Chain rule from weight gradients to γ gradients.
    fn reduce(&self, gw: &[Option<Vec<f64>>]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for &(i, off, n) in &self.layers {
            let (w, s) = (gw[i].as_ref().unwrap(), self.sens[i].as_ref().unwrap());
            let per = w.len() / n;
            for g in 0..n {
                out[off + g] = (g * per..(g + 1) * per).map(|j| w[j] * s[j]).sum();
            }
        }
        out
    }
}

fn to_f64(x: &Tensor) -> Vec<f64> {
    x.data().iter().map(|&v| v as f64).collect()
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Objective over `idx` and, when `grad` is set, its γ gradient.
fn batch_eval(
    model: &NetworkModel,
    params: &Params,
    layout: &GammaLayout,
    inputs: &[Vec<f64>],
    refs: &[Vec<f64>],
    idx: &[usize],
    grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let parts = idx
        .par_iter()
        .map(|&s| {
            let (y, trace) = engine::forward(model, params, inputs[s].clone(), &mut engine::no_hook, grad)?;
            let loss = sq_diff(&y, &refs[s]);
            let g = match trace {
                Some(t) => {
                    let gy = y.iter().zip(&refs[s]).map(|(a, b)| 2.0 * (a - b)).collect();
                    layout.reduce(&engine::backward(model, params, &t, gy).weights)
                }
                None => Vec::new(),
            };
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut g = vec![0.0; if grad { layout.len } else { 0 }];
    for (l, gi) in parts {
        loss += l;
        g.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
    }
    Ok((loss, g))
}

fn params_for(q: &QuantizedModel) -> Params {
    q.float_params()
}

fn check_pair(model: &NetworkModel, qmodel: &QuantizedModel) -> Result<()> {
    if !model.same_topology(qmodel.base()) {
        return Err(Error::InvalidModel(
            "quantized model topology differs from the reference".into(),
        ));
    }
    Ok(())
}

/// Refinement objective of `qmodel` against `model` on `inputs`.
pub fn objective(model: &NetworkModel, qmodel: &QuantizedModel, inputs: &[Tensor]) -> Result<f64> {
    check_pair(model, qmodel)?;
    let fp = Params::from_model(model);
    let q = params_for(qmodel);
    let parts = inputs
        .par_iter()
        .map(|x| {
            model.check_input(x)?;
            let (a, _) = engine::forward(model, &fp, to_f64(x), &mut engine::no_hook, false)?;
            let (b, _) = engine::forward(model, &q, to_f64(x), &mut engine::no_hook, false)?;
            Ok(sq_diff(&a, &b))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum())
}

fn gamma_stats(q: &QuantizedModel) -> Vec<GammaStats> {
    q.weighted_plans()
        .map(|(i, p)| {
            let g = p.gammas();
            let n = g.len() as f64;
            let mean = g.iter().sum::<f64>() / n;
            let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            GammaStats {
                layer: i,
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// Refines every γ by mini-batch gradient descent on the mean per-sample
/// objective. A step that raises its batch objective is halved up to 30
/// times and dropped if it still does not help.
pub fn refine_scales(
    model: &NetworkModel,
    qmodel: &QuantizedModel,
    calib_inputs: &[Tensor],
    cfg: &RefineConfig,
) -> Result<(QuantizedModel, RefineTrace)> {
    cfg.validate()?;
    check_pair(model, qmodel)?;
    if calib_inputs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let inputs_t = &calib_inputs[..cfg.calib_size.min(calib_inputs.len())];
    for x in inputs_t {
        model.check_input(x)?;
    }
    if cfg.epochs == 0 {
        let obj = objective(model, qmodel, inputs_t)?;
        let trace = RefineTrace {
            objective: vec![obj],
            gamma: gamma_stats(qmodel),
        };
        return Ok((qmodel.clone(), trace));
    }
    let inputs: Vec<Vec<f64>> = inputs_t.iter().map(to_f64).collect();
    let fp = Params::from_model(model);
    let refs = inputs
        .par_iter()
        .map(|x| engine::forward(model, &fp, x.clone(), &mut engine::no_hook, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let mut q = qmodel.clone();
    let layout = GammaLayout::new(&q);
    let mut gamma = vec![1.0; layout.len];
    layout.set(&mut q, &gamma);
    let all: Vec<usize> = (0..inputs.len()).collect();
    let full =
        |q: &QuantizedModel| batch_eval(model, &params_for(q), &layout, &inputs, &refs, &all, false).map(|r| r.0);
    let mut trace = vec![full(&q)?];
    let mut velocity = vec![0.0; layout.len];
    let mut order = all.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_eval(model, &params_for(&q), &layout, &inputs, &refs, batch, true)?;
            let scale = 1.0 / batch.len() as f64;
            let step: Vec<f64> = match cfg.optimizer {
                Optimizer::Sgd => grad.iter().map(|g| -cfg.learning_rate * g * scale).collect(),
                Optimizer::SgdMomentum { momentum } => {
                    for (v, g) in velocity.iter_mut().zip(&grad) {
                        *v = momentum * *v - cfg.learning_rate * g * scale;
                    }
                    velocity.clone()
                }
            };
            if step.iter().all(|s| *s == 0.0) {
                continue;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<f64> = gamma.iter().zip(&step).map(|(g, s)| g + t * s).collect();
                layout.set(&mut q, &trial);
                let (l, _) = batch_eval(model, &params_for(&q), &layout, &inputs, &refs, batch, false)?;
                if l <= loss {
                    gamma = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                velocity.iter_mut().for_each(|v| *v = 0.0);
            }
            layout.set(&mut q, &gamma);
        }
        trace.push(full(&q)?);
    }
    q.provenance_mut().insert(
        "refine".to_string(),
        format!(
            "epochs={} batch={} lr={} samples={}",
            cfg.epochs,
            cfg.batch_size,
            cfg.learning_rate,
            inputs.len()
        ),
    );
    let stats = gamma_stats(&q);
    Ok((
        q,
        RefineTrace {
            objective: trace,
            gamma: stats,
        },
    ))
}

/// Relu sign pattern and pooling choices of a forward pass.
fn pattern(model: &NetworkModel, t: &Trace) -> Vec<Vec<usize>> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Relu => Some(
                t.inputs[i]
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v > 0.0)
                    .map(|(j, _)| j)
                    .collect(),
            ),
            Layer::MaxPool(_) => t.pool_args[i].clone(),
            _ => None,
        })
        .collect()
}

/// Largest relative gap between the analytic γ gradient and central
/// differences with step `eps`, on the objective of the single input `x`.
///
/// A γ is skipped when moving it by ±eps changes a relu sign or a max-pool
/// choice, since the objective has a kink there. Gradients below `1e-6`
/// of the largest one are compared against that floor.
pub fn grad_check(model: &NetworkModel, qmodel: &QuantizedModel, x: &Tensor, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-2]")));
    }
    check_pair(model, qmodel)?;
    model.check_input(x)?;
    let input = to_f64(x);
    let fp = Params::from_model(model);
    let (reference, _) = engine::forward(model, &fp, input.clone(), &mut engine::no_hook, false)?;
    let mut q = qmodel.clone();
    let layout = GammaLayout::new(&q);
    let base = layout.get(&q);
    let run = |q: &QuantizedModel| -> Result<(f64, Trace, Vec<f64>)> {
        let p = params_for(q);
        let (y, t) = engine::forward(model, &p, input.clone(), &mut engine::no_hook, true)?;
        Ok((sq_diff(&y, &reference), t.unwrap(), y))
    };
    let (_, t0, y0) = run(&q)?;
    let p0 = pattern(model, &t0);
    let gy = y0.iter().zip(&reference).map(|(a, b)| 2.0 * (a - b)).collect();
    let analytic = layout.reduce(&engine::backward(model, &params_for(&q), &t0, gy).weights);
    let floor = 1e-6 * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    for j in 0..layout.len {
        let mut g = base.clone();
        g[j] = base[j] + eps;
        layout.set(&mut q, &g);
        let (lp, tp, _) = run(&q)?;
        g[j] = base[j] - eps;
        layout.set(&mut q, &g);
        let (lm, tm, _) = run(&q)?;
        if pattern(model, &tp) != p0 || pattern(model, &tm) != p0 {
            continue;
        }
        let fd = (lp - lm) / (2.0 * eps);
        let denom = fd.abs().max(analytic[j].abs()).max(floor);
        if denom > 0.0 {
            worst = worst.max((fd - analytic[j]).abs() / denom);
        }
    }
    Ok(worst)
}
