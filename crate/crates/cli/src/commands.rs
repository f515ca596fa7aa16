//! The `qnet` subcommands. Each takes its parsed flags, does its file I/O and
//! returns a report whose `Display` is what the binary prints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use qnet_core::activations::{calibrate_model, CalibConfig, LayerCalibration};
use qnet_core::multiquant::dual_landscape;
use qnet_core::netmodel::{
    compression_breakdown, compression_ratio, forward_fp, forward_quant_batch, quantize_weights, ForwardMode,
    LayerQuantPlan, NetworkModel, Partitioning, QuantizedModel, WeightQuantConfig,
};
use qnet_core::quantizer::{mse_curve, Method, MethodKind};
use qnet_core::refine::{refine_scales, Optimizer, RefineConfig};
use qnet_core::synthetic::argmax;
use qnet_core::{QuantScheme, Tensor};

use crate::calib;
use crate::container::{self, Container};
use crate::error::{CliError, CliResult};
use crate::io::{read_file, write_csv};

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Uniform,
    Omse,
    Golden,
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActMethodArg {
    Uniform,
    Omse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Integer,
    Floatsim,
}

/// Partitioning rules such as `conv=kernel,fc=global,3=global`. Numeric keys
/// override single layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub conv: Partitioning,
    pub linear: Partitioning,
    pub overrides: BTreeMap<usize, Partitioning>,
}

impl std::str::FromStr for PartitionSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = PartitionSpec {
            conv: Partitioning::KernelWise,
            linear: Partitioning::Global,
            overrides: BTreeMap::new(),
        };
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {item:?}"))?;
            let p: Partitioning = value.trim().parse().map_err(|e: qnet_core::Error| e.to_string())?;
            match key.trim() {
                "conv" => out.conv = p,
                "fc" | "linear" => out.linear = p,
                k => {
                    let i = k.parse().map_err(|_| format!("unknown partition key {k:?}"))?;
                    out.overrides.insert(i, p);
                }
            }
        }
        Ok(out)
    }
}

/// `layer:kernel` selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelRef {
    pub layer: usize,
    pub kernel: usize,
}

impl std::str::FromStr for KernelRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (l, k) = s
            .split_once(':')
            .ok_or_else(|| format!("expected layer:kernel, got {s:?}"))?;
        Ok(KernelRef {
            layer: l.trim().parse().map_err(|_| format!("bad layer index {l:?}"))?,
            kernel: k.trim().parse().map_err(|_| format!("bad kernel index {k:?}"))?,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    /// Full-precision model container.
    pub model: PathBuf,
    /// Output container.
    pub out: PathBuf,
    #[arg(long, default_value_t = 4, env = "QNET_BITS")]
    pub bits: u8,
    /// Unsigned weights with an additive offset.
    #[arg(long, env = "QNET_OFFSET")]
    pub offset: bool,
    #[arg(long, value_enum, default_value_t = MethodArg::Omse, env = "QNET_METHOD")]
    pub method: MethodArg,
    /// Scale grid points of the omse search.
    #[arg(long, default_value_t = 500, env = "QNET_GRID")]
    pub grid: usize,
    /// Key-layer threshold on the weighted mean weight MSE.
    #[arg(long, default_value_t = 8e-5, env = "QNET_TAU")]
    pub tau: f64,
    /// Two-term quantization of key layers.
    #[arg(long, default_value = "on", num_args = 0..=1, default_missing_value = "on",
          value_parser = parse_switch, env = "QNET_DUAL")]
    pub dual: bool,
    /// Grid points per axis of the two-term search.
    #[arg(long, default_value_t = 100, env = "QNET_DUAL_GRID")]
    pub dual_grid: usize,
    #[arg(long, default_value = "conv=kernel,fc=global", env = "QNET_PARTITION")]
    pub partition: PartitionSpec,
    /// Keep the first layer's input in full precision.
    #[arg(long, env = "QNET_SKIP_INPUT_QUANT")]
    pub skip_input_quant: bool,
}

impl QuantizeArgs {
    pub fn config(&self) -> CliResult<WeightQuantConfig> {
        let scheme = QuantScheme::new(self.bits, !self.offset, self.offset)?;
        let method = match self.method {
            MethodArg::Uniform => Method::Uniform,
            MethodArg::Omse => Method::Omse { grid_points: self.grid },
            MethodArg::Golden => Method::default_for(MethodKind::Golden),
            MethodArg::Alternating => Method::default_for(MethodKind::Alternating),
        };
        Ok(WeightQuantConfig {
            scheme,
            method,
            conv_partitioning: self.partition.conv,
            linear_partitioning: self.partition.linear,
            overrides: self.partition.overrides.clone(),
            tau: self.tau,
            dual: self.dual,
            dual_schemes: vec![scheme; 2],
            dual_grid: self.dual_grid,
            skip_input_quant: self.skip_input_quant,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub layer: usize,
    pub kind: &'static str,
    pub partitioning: Partitioning,
    pub terms: usize,
    pub mse: f64,
    pub mse_single: f64,
    pub key: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeReport {
    pub layers: Vec<LayerRow>,
    pub key_layers: Vec<usize>,
    pub dual_layers: usize,
    pub cr_w: f64,
    /// Sum of the per-layer weight MSE.
    pub total_mse: f64,
}

impl fmt::Display for QuantizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.layers {
            writeln!(
                f,
                "layer {} {} {} terms={} mse={:.6e} single={:.6e}{}",
                r.layer,
                r.kind,
                r.partitioning.as_str(),
                r.terms,
                r.mse,
                r.mse_single,
                if r.key { " key" } else { "" }
            )?;
        }
        writeln!(f, "key layers: {:?}", self.key_layers)?;
        writeln!(f, "dual layers: {}", self.dual_layers)?;
        writeln!(f, "total weight mse: {:.6e}", self.total_mse)?;
        write!(f, "CR_w: {:.6}", self.cr_w)
    }
}

fn quantize_report(q: &QuantizedModel) -> QuantizeReport {
    let layers: Vec<LayerRow> = q
        .weighted_plans()
        .map(|(i, p)| LayerRow {
            layer: i,
            kind: q.base().layers()[i].kind().as_str(),
            partitioning: p.partitioning,
            terms: p.term_count(),
            mse: p.weight_mse,
            mse_single: p.weight_mse_single,
            key: p.is_key_layer,
        })
        .collect();
    QuantizeReport {
        key_layers: q.key_layers().into_iter().collect(),
        dual_layers: layers.iter().filter(|r| r.terms > 1).count(),
        total_mse: layers.iter().map(|r| r.mse).sum(),
        cr_w: compression_ratio(q).0,
        layers,
    }
}

pub fn cmd_quantize(args: &QuantizeArgs) -> CliResult<QuantizeReport> {
    let model = container::load_model(&args.model)?;
    let q = quantize_weights(&model, &args.config()?)?;
    container::save(&args.out, &Container::Quantized(q.clone()))?;
    Ok(quantize_report(&q))
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Quantized container.
    pub qmodel: PathBuf,
    /// QCAL1 calibration samples.
    pub calib: PathBuf,
    /// Output container; defaults to updating the input in place.
    #[arg(short, long, env = "QNET_OUT")]
    pub out: Option<PathBuf>,
    /// Scale grid points of the activation search.
    #[arg(long, default_value_t = 50, env = "QNET_GRID")]
    pub grid: usize,
    /// Activation bit width; defaults to the weight bit width.
    #[arg(long, env = "QNET_ACT_BITS")]
    pub act_bits: Option<u8>,
    /// Unsigned activations with an additive offset on every layer.
    #[arg(long, env = "QNET_ACT_OFFSET")]
    pub act_offset: bool,
    /// Activation scale search; `uniform` clips at the observed maximum.
    #[arg(long, value_enum, default_value_t = ActMethodArg::Omse, env = "QNET_ACT_METHOD")]
    pub act_method: ActMethodArg,
    /// Residual activation term on key layers.
    #[arg(long, default_value = "on", num_args = 0..=1, default_missing_value = "on",
          value_parser = parse_switch, env = "QNET_RESIDUAL_ON_KEY_LAYERS")]
    pub residual_on_key_layers: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateReport {
    pub samples: usize,
    pub layers: Vec<LayerCalibration>,
    pub cr_a: f64,
}

impl fmt::Display for CalibrateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "calibration samples: {}", self.samples)?;
        for r in &self.layers {
            write!(
                f,
                "layer {} {}{}bit beta1={:.6e} mse={:.6e} minmax={:.6e}",
                r.layer,
                if r.scheme.is_signed() { "s" } else { "u" },
                r.scheme.bits(),
                r.beta1,
                r.mse,
                r.minmax_mse
            )?;
            if let (Some(b2), Some(m2)) = (r.beta2, r.mse_residual) {
                write!(f, " beta2={b2:.6e} residual_mse={m2:.6e}")?;
            }
            writeln!(f)?;
        }
        write!(f, "CR_a: {:.6}", self.cr_a)
    }
}

/// Weight bit width of the first weighted layer.
fn weight_bits(q: &QuantizedModel) -> u8 {
    q.weighted_plans()
        .next()
        .map_or(4, |(_, p)| p.weight_terms[0][0].scheme().bits())
}

fn load_samples(path: &Path, model: &NetworkModel) -> CliResult<Vec<Tensor>> {
    let set = calib::load(path)?;
    if set.samples.is_empty() {
        return Err(CliError::Invalid(format!("{}: empty calibration set", path.display())));
    }
    if set.shape != model.input_shape() {
        return Err(CliError::Invalid(format!(
            "{}: sample shape {:?} does not match model input {:?}",
            path.display(),
            set.shape,
            model.input_shape()
        )));
    }
    Ok(set.samples)
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> CliResult<CalibrateReport> {
    let q = container::load_quantized(&args.qmodel)?;
    let xs = load_samples(&args.calib, q.base())?;
    let cfg = CalibConfig {
        bits: args.act_bits.unwrap_or_else(|| weight_bits(&q)),
        offset: args.act_offset,
        grid_points: args.grid,
        residual_on_key_layers: args.residual_on_key_layers,
        method: match args.act_method {
            ActMethodArg::Uniform => MethodKind::Uniform,
            ActMethodArg::Omse => MethodKind::Omse,
        },
        ..CalibConfig::default()
    };
    let (cq, layers) = calibrate_model(&q, &xs, &cfg)?;
    container::save(
        args.out.as_ref().unwrap_or(&args.qmodel),
        &Container::Quantized(cq.clone()),
    )?;
    Ok(CalibrateReport {
        samples: xs.len(),
        layers,
        cr_a: compression_ratio(&cq).1,
    })
}

#[derive(Debug, Clone, Args)]
pub struct RefineArgs {
    /// Full-precision reference model.
    pub model: PathBuf,
    /// Quantized container.
    pub qmodel: PathBuf,
    /// QCAL1 calibration samples.
    pub calib: PathBuf,
    /// Output container; defaults to updating the input in place.
    #[arg(short, long, env = "QNET_OUT")]
    pub out: Option<PathBuf>,
    /// Objective trace CSV; defaults to the output path with a `.trace.csv`
    /// extension.
    #[arg(long, env = "QNET_TRACE")]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 25, env = "QNET_EPOCHS")]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3, env = "QNET_LR")]
    pub lr: f64,
    #[arg(long, default_value_t = 32, env = "QNET_BATCH")]
    pub batch: usize,
    /// Momentum coefficient; 0 gives plain SGD.
    #[arg(long, default_value_t = 0.0, env = "QNET_MOMENTUM")]
    pub momentum: f64,
    /// Number of calibration samples used.
    #[arg(long, default_value_t = 500, env = "QNET_CALIB_SIZE")]
    pub calib_size: usize,
    #[arg(long, default_value_t = 0, env = "QNET_SEED")]
    pub seed: u64,
}

impl RefineArgs {
    pub fn trace_path(&self) -> PathBuf {
        self.trace
            .clone()
            .unwrap_or_else(|| self.out.as_ref().unwrap_or(&self.qmodel).with_extension("trace.csv"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub objective: Vec<f64>,
    pub gamma: Vec<(usize, f64, f64)>,
}

impl fmt::Display for RefineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (e, o) in self.objective.iter().enumerate() {
            writeln!(f, "epoch {e} objective={o:.6e}")?;
        }
        for (l, m, s) in &self.gamma {
            writeln!(f, "layer {l} gamma mean={m:.6} std={s:.6}")?;
        }
        Ok(())
    }
}

pub fn cmd_refine(args: &RefineArgs) -> CliResult<RefineReport> {
    let model = container::load_model(&args.model)?;
    let q = container::load_quantized(&args.qmodel)?;
    if !model.same_topology(q.base()) {
        return Err(CliError::Invalid(
            "topology mismatch between model and quantized model".into(),
        ));
    }
    let xs = load_samples(&args.calib, &model)?;
    let cfg = RefineConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        optimizer: if args.momentum == 0.0 {
            Optimizer::Sgd
        } else {
            Optimizer::SgdMomentum {
                momentum: args.momentum,
            }
        },
        calib_size: args.calib_size,
        seed: args.seed,
    };
    let (rq, trace) = refine_scales(&model, &q, &xs, &cfg)?;
    container::save(args.out.as_ref().unwrap_or(&args.qmodel), &Container::Quantized(rq))?;
    let rows: Vec<Vec<String>> = trace
        .objective
        .iter()
        .enumerate()
        .map(|(e, o)| vec![e.to_string(), o.to_string()])
        .collect();
    write_csv(&args.trace_path(), &["epoch", "objective"], &rows)?;
    Ok(RefineReport {
        objective: trace.objective,
        gamma: trace.gamma.iter().map(|g| (g.layer, g.mean, g.std)).collect(),
    })
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Full-precision reference model.
    pub model: PathBuf,
    /// Quantized container, or a full-precision one.
    pub qmodel: PathBuf,
    /// QCAL1 input samples.
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Integer, env = "QNET_MODE")]
    pub mode: ModeArg,
    /// Whitespace-separated class index per sample.
    #[arg(long, env = "QNET_LABELS")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    /// Mean squared output difference against the full-precision model.
    pub output_mse: f64,
    /// Fraction of samples whose argmax matches the full-precision argmax.
    pub agreement: f64,
    pub fp_accuracy: Option<f64>,
    pub q_accuracy: Option<f64>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples: {}", self.samples)?;
        writeln!(f, "output mse: {:.6e}", self.output_mse)?;
        write!(f, "top-1 agreement: {:.4}", self.agreement)?;
        if let (Some(a), Some(b)) = (self.fp_accuracy, self.q_accuracy) {
            write!(f, "\nfp accuracy: {a:.4}\nquantized accuracy: {b:.4}")?;
        }
        Ok(())
    }
}

fn load_labels(path: &Path, n: usize) -> CliResult<Vec<usize>> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| CliError::Invalid(format!("{}: labels are not UTF-8", path.display())))?;
    let labels = text
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if labels.len() != n {
        return Err(CliError::Invalid(format!(
            "{}: {} labels for {n} samples",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let model = container::load_model(&args.model)?;
    let other = container::load(&args.qmodel)?;
    if !model.same_topology(other.model()) {
        return Err(CliError::Invalid(
            "topology mismatch between model and quantized model".into(),
        ));
    }
    let xs = load_samples(&args.data, &model)?;
    let reference = xs
        .iter()
        .map(|x| forward_fp(&model, x, false).map(|o| o.output))
        .collect::<Result<Vec<_>, _>>()?;
    let outputs = match &other {
        Container::Model(m) => xs
            .iter()
            .map(|x| forward_fp(m, x, false).map(|o| o.output))
            .collect::<Result<Vec<_>, _>>()?,
        Container::Quantized(q) => {
            let mode = match args.mode {
                ModeArg::Integer => ForwardMode::IntegerExact,
                ModeArg::Floatsim => ForwardMode::FloatSim,
            };
            forward_quant_batch(q, &xs, mode)?
        }
    };
    let labels = args.labels.as_ref().map(|p| load_labels(p, xs.len())).transpose()?;
    let n = xs.len() as f64;
    let (mut sse, mut count) = (0.0, 0usize);
    let mut agree = 0usize;
    let (mut fp_hit, mut q_hit) = (0usize, 0usize);
    for (s, (r, o)) in reference.iter().zip(&outputs).enumerate() {
        for (a, b) in r.data().iter().zip(o.data()) {
            sse += (*a as f64 - *b as f64).powi(2);
        }
        count += r.len();
        let (ra, oa) = (argmax(r.data()), argmax(o.data()));
        agree += (ra == oa) as usize;
        if let Some(l) = &labels {
            fp_hit += (ra == l[s]) as usize;
            q_hit += (oa == l[s]) as usize;
        }
    }
    Ok(EvalReport {
        samples: xs.len(),
        output_mse: sse / count as f64,
        agreement: agree as f64 / n,
        fp_accuracy: labels.as_ref().map(|_| fp_hit as f64 / n),
        q_accuracy: labels.as_ref().map(|_| q_hit as f64 / n),
    })
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Quantized container.
    pub qmodel: PathBuf,
    /// Directory receiving the CSV files.
    #[arg(long, default_value = ".", env = "QNET_OUT_DIR")]
    pub out_dir: PathBuf,
    /// MSE against α over the grid for one kernel, as `layer:kernel`.
    #[arg(long, env = "QNET_CURVE")]
    pub curve: Option<KernelRef>,
    /// Grid points of the curve.
    #[arg(long, default_value_t = 500, env = "QNET_GRID")]
    pub grid: usize,
    /// Two-term MSE over the (α₁, α₂) grid for one kernel, as `layer:kernel`.
    #[arg(long, env = "QNET_LANDSCAPE")]
    pub landscape: Option<KernelRef>,
    /// Grid points per axis of the landscape.
    #[arg(long, default_value_t = 100, env = "QNET_DUAL_GRID")]
    pub dual_grid: usize,
    /// Per-layer statistics of normalized α, β and γ.
    #[arg(long, env = "QNET_SCALES")]
    pub scales: bool,
    /// Per-layer bit volumes.
    #[arg(long, env = "QNET_COMPRESSION")]
    pub compression: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub cr_w: f64,
    pub cr_a: f64,
    pub written: Vec<PathBuf>,
}

impl fmt::Display for ReportSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CR_w: {:.6}", self.cr_w)?;
        write!(f, "CR_a: {:.6}", self.cr_a)?;
        for p in &self.written {
            write!(f, "\nwrote {}", p.display())?;
        }
        Ok(())
    }
}

/// Full-precision weights of one group with the shape of its terms.
fn group_tensor(q: &QuantizedModel, k: KernelRef) -> CliResult<(&LayerQuantPlan, Tensor)> {
    let plan = q
        .plan(k.layer)
        .ok_or_else(|| CliError::Invalid(format!("layer {} is not a weighted layer", k.layer)))?;
    let group = plan.weight_terms.get(k.kernel).ok_or_else(|| {
        CliError::Invalid(format!(
            "layer {} has {} kernel groups, no index {}",
            k.layer,
            plan.weight_terms.len(),
            k.kernel
        ))
    })?;
    let w = q.base().layers()[k.layer].weight().unwrap();
    let size = w.len() / plan.weight_terms.len();
    let data = w.data()[k.kernel * size..(k.kernel + 1) * size].to_vec();
    Ok((plan, Tensor::new(group[0].shape().to_vec(), data)?))
}

/// Upper end of the integer range used to normalize scales.
fn top(s: QuantScheme) -> f64 {
    let (lo, hi) = s.range();
    if hi > 0 {
        hi as f64
    } else {
        -lo as f64
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn scales_rows(q: &QuantizedModel) -> Vec<Vec<String>> {
    q.weighted_plans()
        .map(|(i, plan)| {
            let w = q.base().layers()[i].weight().unwrap();
            let size = w.len() / plan.weight_terms.len();
            let mut a1 = Vec::new();
            let mut a2 = Vec::new();
            for (g, terms) in plan.weight_terms.iter().enumerate() {
                let m = w.data()[g * size..(g + 1) * size]
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs() as f64));
                if m == 0.0 {
                    continue;
                }
                a1.push(terms[0].alpha() * top(terms[0].scheme()) / m);
                if let Some(t) = terms.get(1) {
                    a2.push(t.alpha() * top(t.scheme()) / m);
                }
            }
            let (a1m, a1s) = if a1.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_std(&a1)
            };
            let (gm, gs) = mean_std(&plan.gammas());
            let act = plan.activation.quant().filter(|a| a.max_abs > 0.0);
            vec![
                i.to_string(),
                q.base().layers()[i].kind().as_str().to_string(),
                plan.partitioning.as_str().to_string(),
                plan.term_count().to_string(),
                if a1.is_empty() { String::new() } else { a1m.to_string() },
                if a1.is_empty() { String::new() } else { a1s.to_string() },
                opt((!a2.is_empty()).then(|| mean_std(&a2).0)),
                gm.to_string(),
                gs.to_string(),
                opt(act.map(|a| a.beta1 * top(a.scheme) / a.max_abs)),
                opt(act.and_then(|a| a.beta2.map(|b| b * top(a.residual_scheme()) / a.max_abs))),
            ]
        })
        .collect()
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<ReportSummary> {
    let q = container::load_quantized(&args.qmodel)?;
    let mut written = Vec::new();
    if let Some(k) = args.curve {
        let (plan, t) = group_tensor(&q, k)?;
        let curve = mse_curve(&t, plan.weight_terms[k.kernel][0].scheme(), args.grid)?;
        let rows: Vec<Vec<String>> = curve.iter().map(|(a, m)| vec![a.to_string(), m.to_string()]).collect();
        let path = args.out_dir.join(format!("curve_{}_{}.csv", k.layer, k.kernel));
        write_csv(&path, &["alpha", "mse"], &rows)?;
        written.push(path);
    }
    if let Some(k) = args.landscape {
        let (plan, t) = group_tensor(&q, k)?;
        let terms = &plan.weight_terms[k.kernel];
        let s1 = terms[0].scheme();
        let s2 = terms.get(1).map_or(s1, |t| t.scheme());
        if s1.has_offset() || s2.has_offset() {
            return Err(CliError::Invalid("landscape requires schemes without offset".into()));
        }
        let land = dual_landscape(&t, s1, s2, args.dual_grid)?;
        let rows: Vec<Vec<String>> = land
            .iter()
            .map(|(a, b, m)| vec![a.to_string(), b.to_string(), m.to_string()])
            .collect();
        let path = args.out_dir.join(format!("landscape_{}_{}.csv", k.layer, k.kernel));
        write_csv(&path, &["alpha1", "alpha2", "mse"], &rows)?;
        written.push(path);
    }
    if args.scales {
        let path = args.out_dir.join("scales.csv");
        write_csv(
            &path,
            &[
                "layer",
                "kind",
                "partitioning",
                "terms",
                "alpha_hi_over_max_abs_mean",
                "alpha_hi_over_max_abs_std",
                "alpha2_hi_over_max_abs_mean",
                "gamma_mean",
                "gamma_std",
                "beta1_hi_over_max_abs",
                "beta2_hi_over_max_abs",
            ],
            &scales_rows(&q),
        )?;
        written.push(path);
    }
    if args.compression {
        let rows: Vec<Vec<String>> = compression_breakdown(&q)
            .iter()
            .map(|r| {
                vec![
                    r.layer.to_string(),
                    r.weight_bits.to_string(),
                    r.weight_bits_fp.to_string(),
                    r.act_bits.to_string(),
                    r.act_bits_fp.to_string(),
                ]
            })
            .collect();
        let path = args.out_dir.join("compression.csv");
        write_csv(
            &path,
            &["layer", "weight_bits", "weight_bits_fp", "act_bits", "act_bits_fp"],
            &rows,
        )?;
        written.push(path);
    }
    let (cr_w, cr_a) = compression_ratio(&q);
    Ok(ReportSummary { cr_w, cr_a, written })
}
