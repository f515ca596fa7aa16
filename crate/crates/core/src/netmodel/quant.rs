//! Weight quantization of a whole model and the quantized forward pass.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::{self, Params};
use super::ops::{self, ConvGeom};
use super::{Layer, NetworkModel};
use crate::error::{Error, Result};
use crate::multiquant::{
    alternating_multi_quantize, dual_line_search_seeded, select_key_layers, MultiQuantResult, DEFAULT_EPS,
    DEFAULT_MAX_SWEEPS, DEFAULT_TAU, DUAL_GRID_POINTS,
};
use crate::quantizer::{omse_grid_search_with, quantize_tensor, Method, MethodKind, QuantResult};
use crate::tensor::{QuantScheme, QuantizedTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partitioning {
    /// One scale set per output kernel (row for linear layers).
    KernelWise,
    /// One scale set for the whole weight tensor.
    Global,
}

impl Partitioning {
    pub fn as_str(&self) -> &'static str {
        match self {
            Partitioning::KernelWise => "kernel",
            Partitioning::Global => "global",
        }
    }
}

impl std::str::FromStr for Partitioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel" | "kernel_wise" | "kernelwise" => Ok(Partitioning::KernelWise),
            "global" => Ok(Partitioning::Global),
            _ => Err(Error::InvalidArgument(format!("unknown partitioning {s:?}"))),
        }
    }
}

/// Input quantization of one weighted layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub scheme: QuantScheme,
    pub beta1: f64,
    /// Offset; 0 unless the scheme has one.
    pub delta: f64,
    /// Scale of the signed residual term, when enabled.
    pub beta2: Option<f64>,
    /// Calibration MSE of the first term alone.
    pub calib_mse: f64,
    /// Calibration MSE with the residual term.
    pub calib_mse_residual: Option<f64>,
    /// Largest magnitude seen during calibration.
    pub max_abs: f64,
}

impl ActQuant {
    /// Residual terms are signed with the bit width of the first term.
    pub fn residual_scheme(&self) -> QuantScheme {
        QuantScheme::signed(self.scheme.bits())
    }

    /// First-term integers and, when enabled, residual integers of `x`.
    pub(crate) fn encode(&self, x: &[f64]) -> (Vec<i32>, Option<Vec<i32>>) {
        let (lo, hi) = self.scheme.range();
        let q1: Vec<i32> = x
            .iter()
            .map(|&v| ((v - self.delta) / self.beta1).round().clamp(lo as f64, hi as f64) as i32)
            .collect();
        let q2 = self.beta2.map(|b2| {
            let (lo2, hi2) = self.residual_scheme().range();
            x.iter()
                .zip(&q1)
                .map(|(&v, &q)| {
                    let r = v - (self.beta1 * q as f64 + self.delta);
                    (r / b2).round().clamp(lo2 as f64, hi2 as f64) as i32
                })
                .collect()
        });
        (q1, q2)
    }

    /// Real-valued reconstruction of `x`.
    pub(crate) fn fake_quant(&self, x: &mut [f64]) {
        let (q1, q2) = self.encode(x);
        for (i, v) in x.iter_mut().enumerate() {
            let mut r = self.beta1 * q1[i] as f64 + self.delta;
            if let (Some(b2), Some(q2)) = (self.beta2, &q2) {
                r += b2 * q2[i] as f64;
            }
            *v = r;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ActivationPlan {
    Uncalibrated,
    /// Input kept in full precision.
    Exempt,
    Quantized(ActQuant),
}

impl ActivationPlan {
    pub fn quant(&self) -> Option<&ActQuant> {
        match self {
            ActivationPlan::Quantized(a) => Some(a),
            _ => None,
        }
    }
}

/// Quantization state of one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuantPlan {
    pub partitioning: Partitioning,
    /// One entry per kernel (kernel-wise) or a single entry (global); every
    /// entry holds the same number of terms.
    pub weight_terms: Vec<Vec<QuantizedTensor>>,
    /// Weight reconstruction MSE of the final terms.
    pub weight_mse: f64,
    /// Weight MSE of the single-term quantization that key-layer selection
    /// was based on.
    pub weight_mse_single: f64,
    pub is_key_layer: bool,
    pub activation: ActivationPlan,
}

impl LayerQuantPlan {
    pub fn term_count(&self) -> usize {
        self.weight_terms[0].len()
    }

    /// One rescale factor per entry of `weight_terms`.
    pub fn gammas(&self) -> Vec<f64> {
        self.weight_terms.iter().map(|g| g[0].gamma()).collect()
    }

    pub fn set_gammas(&mut self, gammas: &[f64]) {
        for (group, &g) in self.weight_terms.iter_mut().zip(gammas) {
            for q in group {
                q.set_gamma(g);
            }
        }
    }

    /// Weight reconstruction `Σ_t γ α_t v_t + δ_t`, flattened in weight order.
    pub fn reconstruct_f64(&self) -> Vec<f64> {
        self.weight_terms
            .iter()
            .flat_map(|group| {
                let n = group[0].len();
                (0..n).map(move |j| {
                    group
                        .iter()
                        .map(|q| q.gamma() * q.alpha() * q.values()[j] as f64 + q.delta())
                        .sum::<f64>()
                })
            })
            .collect()
    }

    /// `∂W/∂γ` for the group owning each element: `Σ_t α_t v_t`.
    pub(crate) fn gamma_sensitivity(&self) -> Vec<f64> {
        self.weight_terms
            .iter()
            .flat_map(|group| {
                let n = group[0].len();
                (0..n).map(move |j| group.iter().map(|q| q.alpha() * q.values()[j] as f64).sum::<f64>())
            })
            .collect()
    }

    fn validate(&self, i: usize, layer: &Layer) -> Result<()> {
        let bad = |m: String| Error::InvalidModel(format!("layer {i} plan: {m}"));
        let w = layer.weight().ok_or_else(|| bad("layer has no weights".into()))?;
        let groups = match self.partitioning {
            Partitioning::KernelWise => layer.kernel_count(),
            Partitioning::Global => 1,
        };
        if self.weight_terms.len() != groups {
            return Err(bad(format!(
                "{} weight groups, expected {groups}",
                self.weight_terms.len()
            )));
        }
        let per = w.len() / groups;
        let terms = self.weight_terms[0].len();
        if terms == 0 {
            return Err(bad("no weight terms".into()));
        }
        for g in &self.weight_terms {
            if g.len() != terms {
                return Err(bad("groups differ in term count".into()));
            }
            let gamma = g[0].gamma();
            if g.iter().any(|q| q.len() != per || q.gamma() != gamma) {
                return Err(bad("term size or rescale factor mismatch".into()));
            }
        }
        if let ActivationPlan::Quantized(a) = &self.activation {
            let ok = |v: f64| v.is_finite() && v > 0.0;
            if !ok(a.beta1) || a.beta2.is_some_and(|b| !ok(b)) || !a.delta.is_finite() {
                return Err(bad("activation scales must be finite and positive".into()));
            }
            if !a.scheme.has_offset() && a.delta != 0.0 {
                return Err(bad("activation offset without offset scheme".into()));
            }
            if a.beta2.is_some() && !self.is_key_layer {
                return Err(bad("residual activation scale on a non-key layer".into()));
            }
        }
        Ok(())
    }
}

/// Weight-quantization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantConfig {
    pub scheme: QuantScheme,
    pub method: Method,
    pub conv_partitioning: Partitioning,
    pub linear_partitioning: Partitioning,
    /// Per-layer partitioning, keyed by layer index.
    pub overrides: BTreeMap<usize, Partitioning>,
    pub tau: f64,
    /// Requantize key layers with two terms.
    pub dual: bool,
    pub dual_schemes: Vec<QuantScheme>,
    pub dual_grid: usize,
    /// Keep the first weighted layer's input in full precision.
    pub skip_input_quant: bool,
}

impl Default for WeightQuantConfig {
    fn default() -> Self {
        Self {
            scheme: QuantScheme::signed(4),
            method: Method::default_for(MethodKind::Omse),
            conv_partitioning: Partitioning::KernelWise,
            linear_partitioning: Partitioning::Global,
            overrides: BTreeMap::new(),
            tau: DEFAULT_TAU,
            dual: true,
            dual_schemes: vec![QuantScheme::signed(4); 2],
            dual_grid: DUAL_GRID_POINTS,
            skip_input_quant: false,
        }
    }
}

impl WeightQuantConfig {
    fn partitioning(&self, i: usize, layer: &Layer) -> Partitioning {
        self.overrides.get(&i).copied().unwrap_or(match layer {
            Layer::Conv2d(_) => self.conv_partitioning,
            _ => self.linear_partitioning,
        })
    }
}

/// A model with a quantization plan for every weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    base: NetworkModel,
    plans: Vec<Option<LayerQuantPlan>>,
    provenance: BTreeMap<String, String>,
}

impl QuantizedModel {
    /// Checks that plans cover exactly the weighted layers and match their
    /// shapes.
    pub fn from_parts(
        base: NetworkModel,
        plans: Vec<Option<LayerQuantPlan>>,
        provenance: BTreeMap<String, String>,
    ) -> Result<Self> {
        if plans.len() != base.layers().len() {
            return Err(Error::InvalidModel(format!(
                "{} plans for {} layers",
                plans.len(),
                base.layers().len()
            )));
        }
        for (i, (layer, plan)) in base.layers().iter().zip(&plans).enumerate() {
            match (layer.is_weighted(), plan) {
                (true, Some(p)) => p.validate(i, layer)?,
                (false, None) => {}
                (true, None) => return Err(Error::InvalidModel(format!("layer {i} has no plan"))),
                (false, Some(_)) => return Err(Error::InvalidModel(format!("layer {i} is not weighted"))),
            }
        }
        Ok(Self {
            base,
            plans,
            provenance,
        })
    }

    /// The full-precision model the plans were built from.
    pub fn base(&self) -> &NetworkModel {
        &self.base
    }

    pub fn plans(&self) -> &[Option<LayerQuantPlan>] {
        &self.plans
    }

    pub fn plan(&self, i: usize) -> Option<&LayerQuantPlan> {
        self.plans.get(i).and_then(Option::as_ref)
    }

    pub(crate) fn plans_mut(&mut self) -> &mut [Option<LayerQuantPlan>] {
        &mut self.plans
    }

    pub fn provenance(&self) -> &BTreeMap<String, String> {
        &self.provenance
    }

    pub fn provenance_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.provenance
    }

    pub fn key_layers(&self) -> BTreeSet<usize> {
        self.weighted_plans()
            .filter(|(_, p)| p.is_key_layer)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn weighted_plans(&self) -> impl Iterator<Item = (usize, &LayerQuantPlan)> {
        self.plans
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    /// The base topology with every weight replaced by its reconstruction.
    pub fn dequantized_model(&self) -> Result<NetworkModel> {
        self.base.map_weights(|i, layer| {
            let w = self.plans[i].as_ref().unwrap().reconstruct_f64();
            let shape = layer.weight().unwrap().shape().to_vec();
            Tensor::new(shape, w.into_iter().map(|v| v as f32).collect())
        })
    }

    /// Copy with every input kept in full precision.
    pub fn without_activation_quant(&self) -> Self {
        let mut out = self.clone();
        for p in out.plans.iter_mut().flatten() {
            p.activation = ActivationPlan::Exempt;
        }
        out
    }

    /// Every weighted layer either quantizes or exempts its input.
    pub fn is_calibrated(&self) -> bool {
        self.weighted_plans()
            .all(|(_, p)| p.activation != ActivationPlan::Uncalibrated)
    }

    /// Exact reconstructed weights, for gradient-based refinement.
    pub(crate) fn float_params(&self) -> Params {
        Params {
            weights: self
                .plans
                .iter()
                .map(|p| p.as_ref().map(LayerQuantPlan::reconstruct_f64))
                .collect(),
            biases: engine::biases(&self.base),
        }
    }

    /// Weights as deployed in 32-bit floats.
    pub(crate) fn dequantized_params(&self) -> Params {
        let mut p = self.float_params();
        for w in p.weights.iter_mut().flatten() {
            w.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        p
    }
}

fn split_groups(w: &Tensor, part: Partitioning) -> Vec<Tensor> {
    match part {
        Partitioning::Global => vec![w.clone()],
        Partitioning::KernelWise => {
            let shape = w.shape()[1..].to_vec();
            let per: usize = shape.iter().product();
            w.data()
                .chunks(per)
                .map(|c| Tensor::new(shape.clone(), c.to_vec()).expect("kernel slice"))
                .collect()
        }
    }
}

fn weighted_mse(groups: &[Tensor], mses: &[f64]) -> f64 {
    let n: usize = groups.iter().map(Tensor::len).sum();
    groups.iter().zip(mses).map(|(g, m)| m * g.len() as f64).sum::<f64>() / n as f64
}

fn multi_group(t: &Tensor, cfg: &WeightQuantConfig) -> Result<MultiQuantResult> {
    let method = cfg.method;
    let mapping = move |r: &Tensor, s: QuantScheme| quantize_tensor(r, s, &method);
    let alt = alternating_multi_quantize(t, &cfg.dual_schemes, mapping, DEFAULT_EPS, DEFAULT_MAX_SWEEPS)?;
    let exact = matches!(method, Method::Omse { .. })
        && cfg.dual_schemes.len() == 2
        && cfg.dual_schemes.iter().all(|s| !s.has_offset())
        && !t.is_all_zero();
    if !exact {
        return Ok(alt);
    }
    let seed = (alt.terms[0].alpha(), alt.terms[1].alpha());
    let dual = dual_line_search_seeded(t, cfg.dual_schemes[0], cfg.dual_schemes[1], cfg.dual_grid, &[seed])?;
    Ok(if dual.mse <= alt.mse { dual } else { alt })
}

/// Single-term quantization of each group. With omse and several groups,
/// the scale the whole layer would share is also tried on every kernel, so a
/// kernel never does worse than under global scaling.
fn single_groups(w: &Tensor, groups: &[Tensor], cfg: &WeightQuantConfig) -> Result<Vec<QuantResult>> {
    let shared = match cfg.method {
        Method::Omse { .. } if groups.len() > 1 && !w.is_all_zero() => {
            Some(quantize_tensor(w, cfg.scheme, &cfg.method)?.alpha())
        }
        _ => None,
    };
    groups
        .par_iter()
        .map(|g| match (shared, cfg.method) {
            (Some(a), Method::Omse { grid_points }) if !g.is_all_zero() => {
                omse_grid_search_with(g, cfg.scheme, grid_points, &[a])
            }
            _ => quantize_tensor(g, cfg.scheme, &cfg.method),
        })
        .collect()
}

/// Quantizes every weighted layer, then gives layers whose weight MSE
/// exceeds `tau` a multi-term representation (when `dual` is set).
pub fn quantize_weights(model: &NetworkModel, cfg: &WeightQuantConfig) -> Result<QuantizedModel> {
    for &i in cfg.overrides.keys() {
        if !model.layers().get(i).is_some_and(Layer::is_weighted) {
            return Err(Error::InvalidArgument(format!(
                "partitioning override for layer {i}, which is not a conv or linear layer"
            )));
        }
    }
    if cfg.dual && cfg.dual_schemes.is_empty() {
        return Err(Error::InvalidArgument(
            "dual quantization needs at least one scheme".into(),
        ));
    }
    let weighted = model.weighted_layers();
    let first = weighted.first().copied();
    let mut plans: Vec<Option<LayerQuantPlan>> = vec![None; model.layers().len()];
    let mut mse_by_layer = BTreeMap::new();
    let mut groups_by_layer = BTreeMap::new();
    for &i in &weighted {
        let layer = &model.layers()[i];
        let part = cfg.partitioning(i, layer);
        let groups = split_groups(layer.weight().unwrap(), part);
        let results = single_groups(layer.weight().unwrap(), &groups, cfg)?;
        let mses: Vec<f64> = results.iter().map(|r| r.mse).collect();
        let layer_mse = weighted_mse(&groups, &mses);
        mse_by_layer.insert(i, layer_mse);
        let activation = if cfg.skip_input_quant && Some(i) == first {
            ActivationPlan::Exempt
        } else {
            ActivationPlan::Uncalibrated
        };
        plans[i] = Some(LayerQuantPlan {
            partitioning: part,
            weight_terms: results.into_iter().map(|r| vec![r.quantized]).collect(),
            weight_mse: layer_mse,
            weight_mse_single: layer_mse,
            is_key_layer: false,
            activation,
        });
        groups_by_layer.insert(i, groups);
    }
    let keys = select_key_layers(&mse_by_layer, cfg.tau);
    for &i in &keys {
        let plan = plans[i].as_mut().unwrap();
        plan.is_key_layer = true;
        if !cfg.dual {
            continue;
        }
        let groups = &groups_by_layer[&i];
        let results = groups
            .par_iter()
            .map(|g| multi_group(g, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mses: Vec<f64> = results.iter().map(|r| r.mse).collect();
        plan.weight_mse = weighted_mse(groups, &mses);
        plan.weight_terms = results.into_iter().map(|r| r.terms).collect();
    }
    let mut provenance = BTreeMap::new();
    provenance.insert(
        "weights".to_string(),
        format!(
            "bits={} signed={} offset={} method={} conv={} linear={} tau={} dual={}",
            cfg.scheme.bits(),
            cfg.scheme.is_signed(),
            cfg.scheme.has_offset(),
            cfg.method.kind(),
            cfg.conv_partitioning.as_str(),
            cfg.linear_partitioning.as_str(),
            cfg.tau,
            cfg.dual
        ),
    );
    QuantizedModel::from_parts(model.clone(), plans, provenance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// Integer dot products with 32-bit checked accumulators.
    IntegerExact,
    /// The same expression on dequantized 32-bit weights and reconstructed
    /// activations, accumulated in f64.
    FloatSim,
}

/// Per-layer integer weights, flattened over all kernels, one entry per term.
struct IntTerm {
    values: Vec<i32>,
    alpha: Vec<f64>,
    delta: Vec<f64>,
    /// Per kernel and output position: sum of integer weights over taps that
    /// fall inside the input.
    wsum: Vec<i32>,
}

struct IntLayer {
    terms: Vec<IntTerm>,
    gamma: Vec<f64>,
    /// Valid taps per output position (conv) or input length (linear).
    nvalid: Vec<i32>,
    positions: usize,
}

enum Geom {
    Conv(ConvGeom),
    Linear { out: usize },
}

impl Geom {
    fn int(&self, x: &[i32], w: &[i32]) -> std::result::Result<Vec<i32>, ops::Overflow> {
        match self {
            Geom::Conv(g) => ops::conv2d_int(x, w, g),
            Geom::Linear { out } => ops::linear_int(x, w, *out),
        }
    }

    fn float(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        match self {
            Geom::Conv(g) => ops::conv2d(x, w, None, g),
            Geom::Linear { out } => ops::linear(x, w, None, *out),
        }
    }

    /// Same geometry with a single all-ones kernel.
    fn ones_kernel(&self) -> (Geom, usize) {
        match self {
            Geom::Conv(g) => (Geom::Conv(ConvGeom { k: 1, ..*g }), g.c * g.kh * g.kw),
            Geom::Linear { .. } => (Geom::Linear { out: 1 }, 0),
        }
    }
}

fn geom(model: &NetworkModel, i: usize) -> Geom {
    match &model.layers()[i] {
        Layer::Conv2d(_) => Geom::Conv(engine::conv_geom(model, i)),
        Layer::Linear(l) => Geom::Linear {
            out: l.weight.shape()[0],
        },
        _ => unreachable!(),
    }
}

fn overflow(layer: usize) -> impl Fn(ops::Overflow) -> Error {
    move |_| Error::AccumulatorOverflow { layer }
}

impl IntLayer {
    fn build(model: &NetworkModel, i: usize, plan: &LayerQuantPlan) -> Result<Self> {
        let layer = &model.layers()[i];
        let k = layer.kernel_count();
        let in_len: usize = model.layer_input_shape(i).iter().product();
        let g = geom(model, i);
        let ones_in = vec![1i32; in_len];
        let per_group = |f: &dyn Fn(&QuantizedTensor) -> f64, t: usize| -> Vec<f64> {
            match plan.partitioning {
                Partitioning::KernelWise => plan.weight_terms.iter().map(|grp| f(&grp[t])).collect(),
                Partitioning::Global => vec![f(&plan.weight_terms[0][t]); k],
            }
        };
        let gamma = per_group(&|q| q.gamma(), 0);
        let mut terms = Vec::new();
        for t in 0..plan.term_count() {
            let values: Vec<i32> = match plan.partitioning {
                Partitioning::KernelWise => plan
                    .weight_terms
                    .iter()
                    .flat_map(|grp| grp[t].values().iter().copied())
                    .collect(),
                Partitioning::Global => plan.weight_terms[0][t].values().to_vec(),
            };
            let wsum = g.int(&ones_in, &values).map_err(overflow(i))?;
            terms.push(IntTerm {
                alpha: per_group(&|q| q.alpha(), t),
                delta: per_group(&|q| q.delta(), t),
                values,
                wsum,
            });
        }
        let (og, taps) = g.ones_kernel();
        let nvalid = match og {
            Geom::Conv(_) => og.int(&ones_in, &vec![1; taps]).map_err(overflow(i))?,
            Geom::Linear { .. } => vec![in_len as i32],
        };
        let positions = nvalid.len();
        Ok(Self {
            terms,
            gamma,
            nvalid,
            positions,
        })
    }

    /// Sum of each input over the taps of every output position.
    fn input_sums_int(&self, g: &Geom, x: &[i32], layer: usize) -> Result<Vec<i32>> {
        let (og, taps) = g.ones_kernel();
        match og {
            Geom::Conv(_) => og.int(x, &vec![1; taps]).map_err(overflow(layer)),
            Geom::Linear { .. } => x
                .iter()
                .try_fold(0i32, |a, &v| a.checked_add(v))
                .map(|s| vec![s])
                .ok_or(Error::AccumulatorOverflow { layer }),
        }
    }

    fn input_sums_float(&self, g: &Geom, x: &[f64]) -> Vec<f64> {
        let (og, taps) = g.ones_kernel();
        match og {
            Geom::Conv(_) => og.float(x, &vec![1.0; taps]),
            Geom::Linear { .. } => vec![x.iter().sum()],
        }
    }

    fn run(&self, g: &Geom, act: &ActivationPlan, x: &[f64], bias: Option<&[f32]>, layer: usize) -> Result<Vec<f64>> {
        let pos = self.positions;
        let k = self.gamma.len();
        let mut y: Vec<f64> = (0..k * pos).map(|j| bias.map_or(0.0, |b| b[j / pos] as f64)).collect();
        match act {
            ActivationPlan::Uncalibrated => return Err(Error::MissingCalibration { layer }),
            ActivationPlan::Exempt => {
                let xs = self.input_sums_float(g, x);
                for t in &self.terms {
                    let wf: Vec<f64> = t.values.iter().map(|&v| v as f64).collect();
                    let acc = g.float(x, &wf);
                    for (j, yj) in y.iter_mut().enumerate() {
                        let kk = j / pos;
                        *yj += self.gamma[kk] * t.alpha[kk] * acc[j] + t.delta[kk] * xs[j % pos];
                    }
                }
            }
            ActivationPlan::Quantized(a) => {
                let (q1, q2) = a.encode(x);
                let xs1 = self.input_sums_int(g, &q1, layer)?;
                let q2 = q2.map(|q| -> Result<_> {
                    let s = self.input_sums_int(g, &q, layer)?;
                    Ok((q, s))
                });
                let q2 = q2.transpose()?;
                for t in &self.terms {
                    let acc1 = g.int(&q1, &t.values).map_err(overflow(layer))?;
                    let acc2 = match &q2 {
                        Some((q, _)) => Some(g.int(q, &t.values).map_err(overflow(layer))?),
                        None => None,
                    };
                    for (j, yj) in y.iter_mut().enumerate() {
                        let kk = j / pos;
                        let p = j % pos;
                        let mut dot = a.beta1 * acc1[j] as f64 + a.delta * t.wsum[j] as f64;
                        let mut xsum = a.beta1 * xs1[p] as f64 + a.delta * self.nvalid[p] as f64;
                        if let (Some(acc2), Some((_, xs2)), Some(b2)) = (&acc2, &q2, a.beta2) {
                            dot += b2 * acc2[j] as f64;
                            xsum += b2 * xs2[p] as f64;
                        }
                        *yj += self.gamma[kk] * t.alpha[kk] * dot + t.delta[kk] * xsum;
                    }
                }
            }
        }
        Ok(y)
    }
}

/// Quantized forward pass over a batch; see [`forward_quant`].
pub fn forward_quant_batch(qmodel: &QuantizedModel, xs: &[Tensor], mode: ForwardMode) -> Result<Vec<Tensor>> {
    let model = qmodel.base();
    for (i, p) in qmodel.weighted_plans() {
        if p.activation == ActivationPlan::Uncalibrated {
            return Err(Error::MissingCalibration { layer: i });
        }
    }
    for x in xs {
        model.check_input(x)?;
    }
    let run = |x: &Tensor, f: &dyn Fn(Vec<f64>) -> Result<Vec<f64>>| -> Result<Tensor> {
        let out = f(x.data().iter().map(|&v| v as f64).collect())?;
        Ok(engine::to_tensor(model.output_shape(), &out))
    };
    match mode {
        ForwardMode::FloatSim => {
            let params = qmodel.dequantized_params();
            xs.par_iter()
                .map(|x| {
                    run(x, &|input| {
                        let mut hook = |i: usize, v: &mut [f64]| {
                            if let ActivationPlan::Quantized(a) = &qmodel.plans[i].as_ref().unwrap().activation {
                                a.fake_quant(v);
                            }
                            Ok(())
                        };
                        engine::forward(model, &params, input, &mut hook, false).map(|(y, _)| y)
                    })
                })
                .collect()
        }
        ForwardMode::IntegerExact => {
            let mut layers = Vec::with_capacity(model.layers().len());
            for (i, p) in qmodel.plans.iter().enumerate() {
                layers.push(match p {
                    Some(p) => Some((IntLayer::build(model, i, p)?, geom(model, i))),
                    None => None,
                });
            }
            xs.par_iter()
                .map(|x| {
                    run(x, &|mut v| {
                        for (i, layer) in model.layers().iter().enumerate() {
                            v = match &layers[i] {
                                Some((il, g)) => {
                                    let act = &qmodel.plans[i].as_ref().unwrap().activation;
                                    il.run(g, act, &v, layer.bias(), i)?
                                }
                                None => engine::apply_unweighted(model, i, v).0,
                            };
                        }
                        Ok(v)
                    })
                })
                .collect()
        }
    }
}

/// Quantized forward pass of one sample.
///
/// `IntegerExact` quantizes each weighted layer's input, runs one integer
/// convolution per weight term (and per activation term), and combines the
/// accumulators with the per-kernel scale products; offsets are applied
/// through precomputed weight and input sums over the valid taps. Relu and
/// pooling act on the rescaled outputs. `FloatSim` evaluates the same
/// expression on reconstructed weights and activations.
pub fn forward_quant(qmodel: &QuantizedModel, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
    forward_quant_batch(qmodel, std::slice::from_ref(x), mode).map(|mut v| v.remove(0))
}

/// Bit volumes of one weighted layer, quantized and full precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub layer: usize,
    pub weight_bits: f64,
    pub weight_bits_fp: f64,
    pub act_bits: f64,
    pub act_bits_fp: f64,
}

/// Per-layer bit volumes behind [`compression_ratio`].
pub fn compression_breakdown(qmodel: &QuantizedModel) -> Vec<CompressionRow> {
    qmodel
        .weighted_plans()
        .map(|(i, plan)| {
            let layer = &qmodel.base().layers()[i];
            let bias = layer.bias().map_or(0, <[f32]>::len) as f64 * 32.0;
            let mut wq = bias;
            for q in plan.weight_terms.iter().flatten() {
                let s = q.scheme();
                wq += q.len() as f64 * s.bits() as f64 + 32.0 * (1.0 + s.has_offset() as u8 as f64);
            }
            let n: f64 = qmodel.base().layer_input_shape(i).iter().product::<usize>() as f64;
            let aq = match &plan.activation {
                ActivationPlan::Quantized(a) => {
                    let bits = a.scheme.bits() as f64;
                    let mut c = n * bits + 32.0 * (1.0 + a.scheme.has_offset() as u8 as f64);
                    if a.beta2.is_some() {
                        c += n * bits + 32.0;
                    }
                    c
                }
                _ => 32.0 * n,
            };
            CompressionRow {
                layer: i,
                weight_bits: wq,
                weight_bits_fp: layer.weight().unwrap().len() as f64 * 32.0 + bias,
                act_bits: aq,
                act_bits_fp: 32.0 * n,
            }
        })
        .collect()
}

/// `(CR_weights, CR_activations)`.
///
/// Each weight term costs `p` bits per element plus 32 bits per scale
/// (α, and δ for offset schemes); biases count 32 bits on both sides.
/// Each quantized input costs `p` bits per element plus 32 bits per scale,
/// twice for residual layers; unquantized inputs count 32 bits on both
/// sides.
pub fn compression_ratio(qmodel: &QuantizedModel) -> (f64, f64) {
    let (mut wq, mut wfp, mut aq, mut afp) = (0.0, 0.0, 0.0, 0.0);
    for r in compression_breakdown(qmodel) {
        wq += r.weight_bits;
        wfp += r.weight_bits_fp;
        aq += r.act_bits;
        afp += r.act_bits_fp;
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 1.0 };
    (ratio(wq, wfp), ratio(aq, afp))
}
