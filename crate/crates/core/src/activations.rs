//! Activation calibration: collecting layer inputs over a calibration set
//! and fitting saturation scales, residual scales and the min/max baseline.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::engine::{self, Params};
use crate::netmodel::{ActQuant, ActivationPlan, NetworkModel, QuantizedModel};
use crate::quantizer::{omse_grid_search_with, quantize_tensor, Method, MethodKind, ACTIVATION_GRID_POINTS};
use crate::tensor::{QuantScheme, Tensor};

/// Per-layer element cap before collection switches to a reservoir sample.
pub const DEFAULT_RESERVOIR_CAP: usize = 1 << 22;

/// Inputs of one weighted layer over the calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    /// `[d, ...]` stacked inputs, or a flat reservoir sample when
    /// `subsampled`.
    pub data: Tensor,
    pub subsampled: bool,
    /// Per-sample extrema, always exact.
    pub sample_min: Vec<f32>,
    pub sample_max: Vec<f32>,
    pub sample_max_abs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub samples: usize,
    /// Keyed by weighted-layer index.
    pub layers: BTreeMap<usize, LayerActivations>,
}

/// Stacks the input of every weighted layer over `inputs`.
pub fn collect_activations(model: &NetworkModel, inputs: &[Tensor]) -> Result<CalibrationStats> {
    collect_activations_capped(model, inputs, DEFAULT_RESERVOIR_CAP, 0)
}

/// Like [`collect_activations`]; a layer whose stacked size would exceed
/// `cap` elements keeps a uniform reservoir sample of `cap` elements
/// instead (seeded, so still deterministic).
pub fn collect_activations_capped(
    model: &NetworkModel,
    inputs: &[Tensor],
    cap: usize,
    seed: u64,
) -> Result<CalibrationStats> {
    if inputs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if cap == 0 {
        return Err(Error::InvalidArgument("reservoir cap must be positive".into()));
    }
    for x in inputs {
        model.check_input(x)?;
    }
    let d = inputs.len();
    let weighted = model.weighted_layers();
    let params = Params::from_model(model);
    let traces: Vec<Vec<Vec<f64>>> = inputs
        .par_iter()
        .map(|x| {
            let v = x.data().iter().map(|&a| a as f64).collect();
            let (_, t) = engine::forward(model, &params, v, &mut engine::no_hook, true)?;
            let mut t = t.unwrap();
            Ok(weighted.iter().map(|&i| std::mem::take(&mut t.inputs[i])).collect())
        })
        .collect::<Result<_>>()?;
    let mut layers = BTreeMap::new();
    for (j, &i) in weighted.iter().enumerate() {
        let shape = model.layer_input_shape(i);
        let n: usize = shape.iter().product();
        let mut sample_min = Vec::with_capacity(d);
        let mut sample_max = Vec::with_capacity(d);
        let mut sample_max_abs = Vec::with_capacity(d);
        let subsampled = n * d > cap;
        let mut data: Vec<f32> = Vec::with_capacity((n * d).min(cap));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        let mut seen = 0usize;
        for t in &traces {
            let s: Vec<f32> = t[j].iter().map(|&v| v as f32).collect();
            sample_min.push(s.iter().cloned().fold(f32::INFINITY, f32::min));
            sample_max.push(s.iter().cloned().fold(f32::NEG_INFINITY, f32::max));
            sample_max_abs.push(s.iter().fold(0.0f32, |m, v| m.max(v.abs())));
            if !subsampled {
                data.extend_from_slice(&s);
                continue;
            }
            for v in s {
                if data.len() < cap {
                    data.push(v);
                } else {
                    let r = rng.random_range(0..=seen);
                    if r < cap {
                        data[r] = v;
                    }
                }
                seen += 1;
            }
        }
        let data = if subsampled {
            Tensor::new(vec![cap], data)?
        } else {
            let mut st = vec![d];
            st.extend_from_slice(shape);
            Tensor::new(st, data)?
        };
        layers.insert(
            i,
            LayerActivations {
                data,
                subsampled,
                sample_min,
                sample_max,
                sample_max_abs,
            },
        );
    }
    Ok(CalibrationStats { samples: d, layers })
}

/// Calibration MSE of `a` on `x`, with or without the residual term.
pub fn activation_mse(x: &Tensor, a: &ActQuant, residual: bool) -> f64 {
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut q = *a;
    if !residual {
        q.beta2 = None;
    }
    let mut r = xs.clone();
    q.fake_quant(&mut r);
    let s: f64 = xs.iter().zip(&r).map(|(u, v)| (u - v) * (u - v)).sum();
    s / xs.len() as f64
}

/// First-term activation scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActScale {
    pub beta1: f64,
    pub delta: f64,
    pub mse: f64,
    /// All calibration values were zero; `beta1 = 1` by convention.
    pub zero: bool,
}

fn first_term(scheme: QuantScheme, beta1: f64, delta: f64) -> ActQuant {
    ActQuant {
        scheme,
        beta1,
        delta,
        beta2: None,
        calib_mse: 0.0,
        calib_mse_residual: None,
        max_abs: 0.0,
    }
}

/// Grid search for `beta1` over the stacked calibration tensor.
pub fn calibrate_activation_scale(x: &Tensor, scheme: QuantScheme, grid_points: usize) -> Result<ActScale> {
    calibrate_activation_scale_with(x, scheme, grid_points, &[])
}

/// [`calibrate_activation_scale`] with extra candidate scales added to the
/// grid (e.g. the min/max baseline).
pub fn calibrate_activation_scale_with(
    x: &Tensor,
    scheme: QuantScheme,
    grid_points: usize,
    extra: &[f64],
) -> Result<ActScale> {
    if grid_points < 2 {
        return Err(Error::GridTooSmall(grid_points));
    }
    x.check_finite()?;
    if x.is_all_zero() {
        return Ok(ActScale {
            beta1: 1.0,
            delta: 0.0,
            mse: 0.0,
            zero: true,
        });
    }
    let r = omse_grid_search_with(x, scheme, grid_points, extra)?;
    let (beta1, delta) = (r.quantized.alpha(), r.quantized.delta());
    let mse = activation_mse(x, &first_term(scheme, beta1, delta), false);
    Ok(ActScale {
        beta1,
        delta,
        mse,
        zero: false,
    })
}

/// Residual scale fitted to `x − (beta1·x̃ + delta)` with a signed scheme
/// of the same width. `None` when the residual is identically zero.
pub fn calibrate_residual_scale(
    x: &Tensor,
    beta1: f64,
    delta: f64,
    scheme: QuantScheme,
    grid_points: usize,
) -> Result<Option<f64>> {
    residual_scale_by(x, beta1, delta, scheme, &Method::Omse { grid_points })
}

/// First-term scale of `x` from any scale search.
fn scale_by(x: &Tensor, scheme: QuantScheme, method: &Method) -> Result<ActScale> {
    x.check_finite()?;
    if x.is_all_zero() {
        return Ok(ActScale {
            beta1: 1.0,
            delta: 0.0,
            mse: 0.0,
            zero: true,
        });
    }
    let r = quantize_tensor(x, scheme, method)?;
    let (beta1, delta) = (r.quantized.alpha(), r.quantized.delta());
    let mse = activation_mse(x, &first_term(scheme, beta1, delta), false);
    Ok(ActScale {
        beta1,
        delta,
        mse,
        zero: false,
    })
}

fn residual_scale_by(x: &Tensor, beta1: f64, delta: f64, scheme: QuantScheme, method: &Method) -> Result<Option<f64>> {
    if !(beta1 > 0.0 && beta1.is_finite()) {
        return Err(Error::InvalidScale(beta1));
    }
    let a = first_term(scheme, beta1, delta);
    let mut r: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    a.fake_quant(&mut r);
    let resid: Vec<f32> = x.data().iter().zip(&r).map(|(&v, &q)| (v as f64 - q) as f32).collect();
    let resid = Tensor::new(x.shape().to_vec(), resid)?;
    if resid.is_all_zero() {
        return Ok(None);
    }
    let q = quantize_tensor(&resid, a.residual_scheme(), method)?;
    Ok(Some(q.quantized.alpha()))
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

/// Min/max clipping baseline from per-sample extrema: offset schemes take
/// `δ = mean(min)` and `α = (mean(max) − δ)/(2^p − 1)`; others take
/// `α = mean(max|x|)/hi`.
pub fn minmax_from_extrema(min: &[f32], max: &[f32], max_abs: &[f32], scheme: QuantScheme) -> (f64, f64) {
    if scheme.has_offset() {
        let delta = mean(min);
        let (_, hi) = scheme.range();
        ((mean(max) - delta) / hi as f64, delta)
    } else {
        (mean(max_abs) / scheme.scale_divisor(), 0.0)
    }
}

/// Min/max baseline on a stacked `[d, ...]` calibration tensor.
pub fn minmax_baseline(x: &Tensor, scheme: QuantScheme) -> Result<(f64, f64)> {
    let d = *x.shape().first().ok_or(Error::EmptyCalibration)?;
    if d == 0 {
        return Err(Error::EmptyCalibration);
    }
    let per = x.len() / d;
    let (mut mn, mut mx, mut ma) = (Vec::new(), Vec::new(), Vec::new());
    for s in x.data().chunks(per) {
        mn.push(s.iter().cloned().fold(f32::INFINITY, f32::min));
        mx.push(s.iter().cloned().fold(f32::NEG_INFINITY, f32::max));
        ma.push(s.iter().fold(0.0f32, |m, v| m.max(v.abs())));
    }
    Ok(minmax_from_extrema(&mn, &mx, &ma, scheme))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub bits: u8,
    /// Scale search for both activation terms; `grid_points` and the
    /// min/max injection apply to omse.
    pub method: MethodKind,
    /// Unsigned with offset for every layer; otherwise unsigned for
    /// non-negative inputs and signed elsewhere.
    pub offset: bool,
    pub grid_points: usize,
    /// Add the residual term on key layers.
    pub residual_on_key_layers: bool,
    /// Put the min/max baseline scale on the search grid.
    pub inject_minmax: bool,
    pub reservoir_cap: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            method: MethodKind::Omse,
            offset: false,
            grid_points: ACTIVATION_GRID_POINTS,
            residual_on_key_layers: true,
            inject_minmax: true,
            reservoir_cap: DEFAULT_RESERVOIR_CAP,
        }
    }
}

/// Calibration outcome of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub layer: usize,
    pub scheme: QuantScheme,
    pub beta1: f64,
    pub delta: f64,
    pub beta2: Option<f64>,
    pub mse: f64,
    pub mse_residual: Option<f64>,
    /// Calibration MSE of the min/max baseline scale.
    pub minmax_mse: f64,
}

/// Scheme for a layer whose calibration minimum is `min`.
pub fn activation_scheme(bits: u8, offset: bool, min: f32) -> Result<QuantScheme> {
    if offset {
        QuantScheme::new(bits, false, true)
    } else {
        QuantScheme::new(bits, min < 0.0, false)
    }
}

/// Fits one layer's activation plan from its calibration data.
pub fn calibrate_layer(
    layer: usize,
    acts: &LayerActivations,
    key_layer: bool,
    cfg: &CalibConfig,
) -> Result<(ActQuant, LayerCalibration)> {
    let x = &acts.data;
    let min = acts.sample_min.iter().cloned().fold(f32::INFINITY, f32::min);
    let scheme = activation_scheme(cfg.bits, cfg.offset, min)?;
    let (mm_alpha, mm_delta) = minmax_from_extrema(&acts.sample_min, &acts.sample_max, &acts.sample_max_abs, scheme);
    let extra: Vec<f64> = if cfg.inject_minmax && mm_alpha > 0.0 && mm_alpha.is_finite() {
        vec![mm_alpha]
    } else {
        vec![]
    };
    let method = match cfg.method {
        MethodKind::Omse => Method::Omse {
            grid_points: cfg.grid_points,
        },
        kind => Method::default_for(kind),
    };
    let s = match cfg.method {
        MethodKind::Omse => calibrate_activation_scale_with(x, scheme, cfg.grid_points, &extra)?,
        _ => scale_by(x, scheme, &method)?,
    };
    let mut a = first_term(scheme, s.beta1, s.delta);
    a.calib_mse = s.mse;
    a.max_abs = acts.sample_max_abs.iter().cloned().fold(0.0f32, f32::max) as f64;
    if key_layer && cfg.residual_on_key_layers && !s.zero {
        if let Some(b2) = residual_scale_by(x, s.beta1, s.delta, scheme, &method)? {
            a.beta2 = Some(b2);
            a.calib_mse_residual = Some(activation_mse(x, &a, true));
        }
    }
    let minmax_mse = if mm_alpha > 0.0 && mm_alpha.is_finite() {
        // The baseline's offset is the mean minimum, not the global one.
        let mut b = first_term(scheme, mm_alpha, if scheme.has_offset() { mm_delta } else { 0.0 });
        b.beta2 = None;
        activation_mse(x, &b, false)
    } else {
        s.mse
    };
    let report = LayerCalibration {
        layer,
        scheme,
        beta1: a.beta1,
        delta: a.delta,
        beta2: a.beta2,
        mse: a.calib_mse,
        mse_residual: a.calib_mse_residual,
        minmax_mse,
    };
    Ok((a, report))
}

/// Calibrates every non-exempt weighted layer of `qmodel` on activations
/// collected from its weight-dequantized network.
pub fn calibrate_model(
    qmodel: &QuantizedModel,
    inputs: &[Tensor],
    cfg: &CalibConfig,
) -> Result<(QuantizedModel, Vec<LayerCalibration>)> {
    let deq = qmodel.dequantized_model()?;
    let stats = collect_activations_capped(&deq, inputs, cfg.reservoir_cap, 0)?;
    let keys = qmodel.key_layers();
    let jobs: Vec<(usize, &LayerActivations)> = stats
        .layers
        .iter()
        .filter(|(i, _)| qmodel.plan(**i).unwrap().activation != ActivationPlan::Exempt)
        .map(|(i, a)| (*i, a))
        .collect();
    let fitted = jobs
        .par_iter()
        .map(|&(i, acts)| calibrate_layer(i, acts, keys.contains(&i), cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut out = qmodel.clone();
    let mut reports = Vec::with_capacity(fitted.len());
    for ((i, _), (a, rep)) in jobs.iter().zip(fitted) {
        out.plans_mut()[*i].as_mut().unwrap().activation = ActivationPlan::Quantized(a);
        reports.push(rep);
    }
    out.provenance_mut().insert(
        "activations".to_string(),
        format!(
            "method={} bits={} offset={} grid={} residual={} samples={}",
            cfg.method, cfg.bits, cfg.offset, cfg.grid_points, cfg.residual_on_key_layers, stats.samples
        ),
    );
    Ok((out, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: Vec<f32>) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn on_grid_unsigned_activations_have_zero_error() {
        let x = t(vec![2, 3], vec![0.0, 0.5, 1.0, 7.5, 2.0, 3.5]);
        let s = calibrate_activation_scale(&x, QuantScheme::unsigned(4), 50).unwrap();
        assert_eq!(s.mse, 0.0);
        assert!(!s.zero);
    }

    #[test]
    fn all_zero_activations_use_unit_scale() {
        let x = Tensor::zeros(vec![3, 4]).unwrap();
        let s = calibrate_activation_scale(&x, QuantScheme::unsigned(4), 50).unwrap();
        assert_eq!((s.beta1, s.mse, s.zero), (1.0, 0.0, true));
    }

    #[test]
    fn exact_first_term_disables_residual() {
        let x = t(vec![1, 4], vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(
            calibrate_residual_scale(&x, 1.0, 0.0, QuantScheme::unsigned(4), 50).unwrap(),
            None
        );
    }

    #[test]
    fn minmax_uses_mean_extrema() {
        let x = t(vec![2, 2], vec![0.0, 10.0, -5.0, 20.0]);
        let (a, d) = minmax_baseline(&x, QuantScheme::signed(4)).unwrap();
        assert_eq!((a, d), (15.0 / 7.0, 0.0));
        let (a, d) = minmax_baseline(&x, QuantScheme::with_offset(4)).unwrap();
        assert_eq!(d, -2.5);
        assert!((a - 17.5 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn minmax_single_sample_is_uniform_rule() {
        let x = t(vec![1, 3], vec![-1.0, 0.5, 0.25]);
        let (a, _) = minmax_baseline(&x, QuantScheme::signed(4)).unwrap();
        let u = crate::quantizer::uniform_quantize(&x, QuantScheme::signed(4)).unwrap();
        assert_eq!(a, u.alpha());
    }
}
