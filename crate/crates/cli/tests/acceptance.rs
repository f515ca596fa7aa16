//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use qnet_cli::container::{self, Container};
use qnet_cli::{calib, fixtures};
use qnet_core::activations::{activation_mse, calibrate_model, collect_activations, CalibConfig};
use qnet_core::multiquant::{
    alternating_multi_quantize, dual_line_search_seeded, omse_mapping, DEFAULT_EPS, DEFAULT_MAX_SWEEPS,
    DUAL_GRID_POINTS,
};
use qnet_core::netmodel::{
    compression_ratio, forward_fp, forward_quant, forward_quant_batch, mse_bound_report, quantize_weights, Conv2d,
    ForwardMode, InputDist, Layer, NetworkModel, Partitioning, QuantizedModel, WeightQuantConfig,
};
use qnet_core::quantizer::{
    alpha_grid, alternating_quantize, golden_section_quantize, omse_grid_search, uniform_quantize, Method, MethodKind,
    ALTERNATING_MAX_ITER, GOLDEN_TOLERANCE, WEIGHT_GRID_POINTS,
};
use qnet_core::refine::{grad_check, refine_scales, RefineConfig};
use qnet_core::synthetic::{argmax, high_dynamic_range_layer, random_conv_net, random_linear_net, random_tensor, Dist};
use qnet_core::{QuantScheme, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<f64, String> {
    let s = t.elapsed().as_secs_f64();
    ensure(t.elapsed() < limit, || {
        format!("took {s:.1}s, limit {}s", limit.as_secs())
    })?;
    Ok(s)
}

fn s4() -> QuantScheme {
    QuantScheme::signed(4)
}

fn no_dual() -> WeightQuantConfig {
    WeightQuantConfig {
        tau: f64::INFINITY,
        ..Default::default()
    }
}

/// Random tensors with shapes up to 8×8×5×5 and mixed distributions.
fn corpus(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let shape = vec![
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=5),
                rng.random_range(1..=5),
            ];
            random_tensor(&mut rng, shape, Dist::ALL[i % Dist::ALL.len()])
        })
        .collect()
}

/// Reconstruction error of one scale, written out independently of the
/// library: round half away from zero, clamp, store as f32.
fn oracle_mse(data: &[f32], alpha: f64, lo: i32, hi: i32) -> f64 {
    let sse: f64 = data
        .iter()
        .map(|&x| {
            let v = (x as f64 / alpha).round().clamp(lo as f64, hi as f64);
            let r = (alpha * v) as f32;
            (x as f64 - r as f64).powi(2)
        })
        .sum();
    sse / data.len() as f64
}

fn oracle_alpha_max(data: &[f32], hi: i32) -> f64 {
    data.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs())) / hi as f64
}

fn c1_omse_dominance() -> Outcome {
    let t0 = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    for (i, t) in corpus(1000, 1).iter().enumerate() {
        let o = omse_grid_search(t, s4(), WEIGHT_GRID_POINTS).map_err(|e| e.to_string())?;
        let u = uniform_quantize(t, s4()).map_err(|e| e.to_string())?;
        ensure(o.mse <= u.mse, || {
            format!("tensor {i}: omse {} > uniform {}", o.mse, u.mse)
        })?;
        worst = worst.max(o.mse / u.mse);
    }
    let s = within(t0, Duration::from_secs(30))?;
    Ok(format!("1000 tensors, worst omse/uniform {worst:.4}, {s:.1}s"))
}

fn c2_omse_vs_oracle() -> Outcome {
    let t0 = Instant::now();
    let (lo, hi) = s4().range();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..200 {
        let n = rng.random_range(2..=256);
        let t = random_tensor(&mut rng, vec![n], Dist::ALL[i % Dist::ALL.len()]);
        let o = omse_grid_search(&t, s4(), WEIGHT_GRID_POINTS).map_err(|e| e.to_string())?;
        let am = oracle_alpha_max(t.data(), hi);
        let dense = (1..=50_000)
            .map(|k| oracle_mse(t.data(), am * k as f64 / 50_000.0, lo, hi))
            .fold(f64::INFINITY, f64::min);
        let rel = (o.mse - dense) / dense;
        ensure(rel <= 0.01, || format!("tensor {i}: {} vs dense {dense}", o.mse))?;
        worst = worst.max(rel);
    }
    for i in 0..40 {
        let n = 1 + i % 4;
        let t = random_tensor(&mut rng, vec![n], Dist::ALL[i % Dist::ALL.len()]);
        let o = omse_grid_search(&t, s4(), WEIGHT_GRID_POINTS).map_err(|e| e.to_string())?;
        let am = oracle_alpha_max(t.data(), hi);
        let mut best = f64::INFINITY;
        for &a in &alpha_grid(am, WEIGHT_GRID_POINTS) {
            let span = (hi - lo + 1) as usize;
            for code in 0..span.pow(n as u32) {
                let mut c = code;
                let mut sse = 0.0;
                for &x in t.data() {
                    let v = lo + (c % span) as i32;
                    c /= span;
                    sse += (x as f64 - (a * v as f64) as f32 as f64).powi(2);
                }
                best = best.min(sse / n as f64);
            }
        }
        ensure((o.mse - best).abs() <= 1e-12 * best.max(1e-30), || {
            format!("tiny tensor {i}: {} vs brute force {best}", o.mse)
        })?;
    }
    let s = within(t0, Duration::from_secs(120))?;
    Ok(format!(
        "200 tensors, worst excess over 50k scan {:.3}%; 40 tiny tensors exact; {s:.1}s",
        100.0 * worst
    ))
}

fn c3_method_ordering() -> Outcome {
    let ts = corpus(1000, 1);
    let mut sums = [0.0f64; 4];
    for t in &ts {
        sums[0] += uniform_quantize(t, s4()).map_err(|e| e.to_string())?.mse;
        sums[1] += omse_grid_search(t, s4(), WEIGHT_GRID_POINTS)
            .map_err(|e| e.to_string())?
            .mse;
        sums[2] += golden_section_quantize(t, s4(), GOLDEN_TOLERANCE)
            .map_err(|e| e.to_string())?
            .mse;
        sums[3] += alternating_quantize(t, s4(), ALTERNATING_MAX_ITER)
            .map_err(|e| e.to_string())?
            .mse;
    }
    let m = sums.map(|s| s / ts.len() as f64);
    let line = format!(
        "means uniform {:.4e} omse {:.4e} golden {:.4e} alternating {:.4e}",
        m[0], m[1], m[2], m[3]
    );
    ensure(m[1] <= m[2] && m[1] <= m[3], || line.clone())?;
    Ok(line)
}

fn c4_dual_chain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dists = [Dist::Gaussian, Dist::Laplace, Dist::HeavyTail, Dist::Uniform];
    let (mut ratio, mut counted) = (0.0, 0usize);
    let mut vs_single = 0.0;
    for i in 0..200 {
        let c = rng.random_range(1..=16);
        let t = random_tensor(&mut rng, vec![c, 3, 3], dists[i % dists.len()]);
        let single = omse_grid_search(&t, s4(), WEIGHT_GRID_POINTS).map_err(|e| e.to_string())?;
        let alt = alternating_multi_quantize(
            &t,
            &[s4(), s4()],
            omse_mapping(WEIGHT_GRID_POINTS),
            DEFAULT_EPS,
            DEFAULT_MAX_SWEEPS,
        )
        .map_err(|e| e.to_string())?;
        let seeds = [(alt.terms[0].alpha(), alt.terms[1].alpha())];
        let dual = dual_line_search_seeded(&t, s4(), s4(), DUAL_GRID_POINTS, &seeds).map_err(|e| e.to_string())?;
        ensure(alt.mse <= single.mse + 1e-12, || {
            format!("kernel {i}: alternating {} > single {}", alt.mse, single.mse)
        })?;
        ensure(dual.mse <= alt.mse + 1e-12, || {
            format!("kernel {i}: exact {} > alternating {}", dual.mse, alt.mse)
        })?;
        if dual.mse > 0.0 {
            ratio += alt.mse / dual.mse;
            vs_single += single.mse / dual.mse;
            counted += 1;
        }
    }
    Ok(format!(
        "200 kernels; mean alternating/exact dual MSE ratio {:.2} (reference figure: 5x), mean single/exact {:.2}",
        ratio / counted as f64,
        vs_single / counted as f64
    ))
}

fn c5_kernel_wise() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let m = random_conv_net(&mut ChaCha8Rng::seed_from_u64(100 + seed));
        let kw = quantize_weights(
            &m,
            &WeightQuantConfig {
                linear_partitioning: Partitioning::KernelWise,
                ..no_dual()
            },
        )
        .map_err(|e| e.to_string())?;
        let gl = quantize_weights(
            &m,
            &WeightQuantConfig {
                conv_partitioning: Partitioning::Global,
                ..no_dual()
            },
        )
        .map_err(|e| e.to_string())?;
        for ((l, a), (_, b)) in kw.weighted_plans().zip(gl.weighted_plans()) {
            ensure(a.weight_mse <= b.weight_mse, || {
                format!(
                    "model {seed} layer {l}: kernel-wise {} > global {}",
                    a.weight_mse, b.weight_mse
                )
            })?;
            if b.weight_mse > 0.0 {
                worst = worst.max(a.weight_mse / b.weight_mse);
            }
        }
    }
    let m = high_dynamic_range_layer(5);
    let kw = quantize_weights(&m, &no_dual()).map_err(|e| e.to_string())?;
    let gl = quantize_weights(
        &m,
        &WeightQuantConfig {
            conv_partitioning: Partitioning::Global,
            ..no_dual()
        },
    )
    .map_err(|e| e.to_string())?;
    let ratio = gl.plan(0).unwrap().weight_mse / kw.plan(0).unwrap().weight_mse;
    ensure(ratio > 10.0, || format!("high-dynamic-range ratio {ratio:.2}"))?;
    Ok(format!(
        "50 models, max kernel-wise/global {worst:.4}; high-dynamic-range global/kernel-wise {ratio:.1}"
    ))
}

fn c6_compression() -> Outcome {
    let m = container::load_model(&fixtures::trained_path()).map_err(|e| e.to_string())?;
    let q = quantize_weights(&m, &no_dual()).map_err(|e| e.to_string())?;
    let (cr, _) = compression_ratio(&q);
    ensure((0.125..=0.13).contains(&cr), || format!("fixture CR_w {cr}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = random_tensor(&mut rng, vec![64, 64, 3, 3], Dist::Gaussian);
    let layer = NetworkModel::new(
        vec![64, 4, 4],
        vec![Layer::Conv2d(Conv2d {
            weight: w,
            bias: None,
            stride: 1,
            padding: 1,
        })],
    )
    .map_err(|e| e.to_string())?;
    let (hand, _) = compression_ratio(&quantize_weights(&layer, &no_dual()).map_err(|e| e.to_string())?);
    let expect = (36864.0 * 4.0 + 64.0 * 32.0) / (36864.0 * 32.0);
    ensure(hand == expect && format!("{hand:.5}") == "0.12674", || {
        format!("hand-counted layer {hand}")
    })?;
    Ok(format!("fixture CR_w {cr:.6}; hand-counted layer {hand:.5}"))
}

/// Largest `|a − b| / max(|b|, 1e-3 · max|b|)` over the elements.
fn rel_gap(a: &Tensor, b: &Tensor) -> f64 {
    let floor = 1e-3 * b.max_abs() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs() / (y as f64).abs().max(floor).max(1e-30))
        .fold(0.0, f64::max)
}

fn c7_linearity() -> Outcome {
    let t0 = Instant::now();
    let (mut int_gap, mut deq_gap) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let m = random_conv_net(&mut rng);
        let shape = m.input_shape().to_vec();
        let xs: Vec<Tensor> = (0..20)
            .map(|_| random_tensor(&mut rng, shape.clone(), Dist::Gaussian))
            .collect();
        let q = quantize_weights(&m, &WeightQuantConfig::default()).map_err(|e| e.to_string())?;
        let (cq, _) = calibrate_model(&q, &xs[..16], &CalibConfig::default()).map_err(|e| e.to_string())?;
        let test = &xs[16..];
        let a = forward_quant_batch(&cq, test, ForwardMode::IntegerExact).map_err(|e| e.to_string())?;
        let b = forward_quant_batch(&cq, test, ForwardMode::FloatSim).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            int_gap = int_gap.max(rel_gap(x, y));
        }
        let plain = cq.without_activation_quant();
        let deq = plain.dequantized_model().map_err(|e| e.to_string())?;
        for x in test {
            let f = forward_quant(&plain, x, ForwardMode::FloatSim).map_err(|e| e.to_string())?;
            let r = forward_fp(&deq, x, false).map_err(|e| e.to_string())?.output;
            deq_gap = deq_gap.max(rel_gap(&f, &r));
        }
    }
    ensure(int_gap <= 1e-4, || format!("integer vs float-sim gap {int_gap:.3e}"))?;
    ensure(deq_gap <= 1e-6, || {
        format!("float-sim vs dequantized gap {deq_gap:.3e}")
    })?;
    let s = within(t0, Duration::from_secs(60))?;
    Ok(format!(
        "100 models; integer/float-sim gap {int_gap:.2e}, float-sim/dequantized gap {deq_gap:.2e}; {s:.1}s"
    ))
}

fn c8_bound() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let m = random_linear_net(&mut rng, &[16, 12, 10, 8]);
        let q = quantize_weights(
            &m,
            &WeightQuantConfig {
                linear_partitioning: Partitioning::KernelWise,
                ..no_dual()
            },
        )
        .map_err(|e| e.to_string())?;
        let rows =
            mse_bound_report(&m, &q, 10_000, InputDist::Gaussian { std: 1.0 }, seed).map_err(|e| e.to_string())?;
        for r in &rows {
            ensure(r.measured_e2 <= 1.05 * r.bound_e2, || format!("net {seed}: {r:?}"))?;
            worst = worst.max(r.measured_e2 / r.bound_e2);
        }
    }
    Ok(format!("20 nets, largest measured/bound {worst:.4}"))
}

fn c9_refinement() -> Outcome {
    let t0 = Instant::now();
    let m = container::load_model(&fixtures::trained_path()).map_err(|e| e.to_string())?;
    let xs = calib::load(&fixtures::calib_path()).map_err(|e| e.to_string())?.samples;
    let q = quantize_weights(&m, &WeightQuantConfig::default()).map_err(|e| e.to_string())?;
    let (cq, _) = calibrate_model(&q, &xs, &CalibConfig::default()).map_err(|e| e.to_string())?;

    let mut plans = cq.plans().to_vec();
    for plan in plans.iter_mut().flatten() {
        let n = plan.gammas().len();
        plan.set_gammas(&vec![1.0; n]);
    }
    let unit =
        QuantizedModel::from_parts(cq.base().clone(), plans, cq.provenance().clone()).map_err(|e| e.to_string())?;
    let (zero, _) = refine_scales(
        &m,
        &cq,
        &xs,
        &RefineConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(unit == cq && zero == cq, || {
        "setting gamma to 1 changed the plans".into()
    })?;
    for mode in [ForwardMode::IntegerExact, ForwardMode::FloatSim] {
        let a = forward_quant_batch(&unit, &xs[..16], mode).map_err(|e| e.to_string())?;
        let b = forward_quant_batch(&cq, &xs[..16], mode).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("gamma = 1 changed {mode:?} outputs"))?;
    }

    let mut gc = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let net = random_conv_net(&mut rng);
        let nq = quantize_weights(&net, &WeightQuantConfig::default()).map_err(|e| e.to_string())?;
        let x = random_tensor(&mut rng, net.input_shape().to_vec(), Dist::Gaussian);
        gc = gc.max(grad_check(&net, &nq, &x, 1e-5).map_err(|e| e.to_string())?);
    }
    ensure(gc < 1e-4, || format!("grad_check {gc:.3e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_tensor(&mut rng, vec![1, 20], Dist::Gaussian);
    let lin = NetworkModel::new(
        vec![20],
        vec![Layer::Linear(qnet_core::netmodel::Linear { weight: w, bias: None })],
    )
    .map_err(|e| e.to_string())?;
    let lq = quantize_weights(&lin, &no_dual()).map_err(|e| e.to_string())?;
    let x = random_tensor(&mut rng, vec![20], Dist::Gaussian);
    let y = forward_fp(&lin, &x, false).map_err(|e| e.to_string())?.output.data()[0] as f64;
    let yq = forward_fp(&lq.dequantized_model().map_err(|e| e.to_string())?, &x, false)
        .map_err(|e| e.to_string())?
        .output
        .data()[0] as f64;
    let cfg = RefineConfig {
        epochs: 200,
        batch_size: 1,
        learning_rate: 0.25 / (yq * yq),
        ..Default::default()
    };
    let (r, _) = refine_scales(&lin, &lq, &[x], &cfg).map_err(|e| e.to_string())?;
    let gamma = r.plan(0).unwrap().gammas()[0];
    let target = y / yq;
    ensure((gamma - target).abs() <= 1e-4 * target.abs(), || {
        format!("gamma {gamma} vs closed form {target}")
    })?;

    let cfg = RefineConfig {
        calib_size: 64,
        ..Default::default()
    };
    let (_, trace) = refine_scales(&m, &cq, &xs, &cfg).map_err(|e| e.to_string())?;
    let (first, last) = (trace.objective[0], *trace.objective.last().unwrap());
    ensure(trace.objective.len() == 26 && last < first, || {
        format!("objective {first} -> {last}")
    })?;
    let s = within(t0, Duration::from_secs(120))?;
    Ok(format!(
        "gamma=1 bit-exact; grad_check {gc:.2e}; closed-form gamma {gamma:.6} vs {target:.6}; fixture objective {first:.4e} -> {last:.4e}; {s:.1}s"
    ))
}

/// Worst ratio of held-out to fit MSE over the calibrated layers, using the
/// deployed reconstruction (with the residual term where present).
fn held_out_ratio(q: &QuantizedModel, deq: &NetworkModel, fit: &[Tensor], held: &[Tensor]) -> Result<f64, String> {
    let (cq, rows) = calibrate_model(q, fit, &CalibConfig::default()).map_err(|e| e.to_string())?;
    let stats = collect_activations(deq, held).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for r in &rows {
        let act = cq.plan(r.layer).unwrap().activation.quant().unwrap();
        let fit_mse = r.mse_residual.unwrap_or(r.mse);
        let out = activation_mse(&stats.layers[&r.layer].data, act, r.mse_residual.is_some());
        if fit_mse > 0.0 {
            worst = worst.max(out / fit_mse);
        }
    }
    Ok(worst)
}

fn c10_residual() -> Outcome {
    let m = container::load_model(&fixtures::trained_path()).map_err(|e| e.to_string())?;
    let xs = calib::load(&fixtures::calib_path()).map_err(|e| e.to_string())?.samples;
    let q = quantize_weights(&m, &WeightQuantConfig::default()).map_err(|e| e.to_string())?;
    let (_, rows) = calibrate_model(&q, &xs, &CalibConfig::default()).map_err(|e| e.to_string())?;
    for r in &rows {
        if let Some(res) = r.mse_residual {
            ensure(res <= r.mse, || {
                format!("layer {}: residual {res} > single {}", r.layer, r.mse)
            })?;
        }
        ensure(r.mse <= r.minmax_mse, || {
            format!("layer {}: omse {} > minmax {}", r.layer, r.mse, r.minmax_mse)
        })?;
    }
    let deq = q.dequantized_model().map_err(|e| e.to_string())?;
    let (a, b) = xs.split_at(xs.len() / 2);
    let split = held_out_ratio(&q, &deq, a, b)?.max(held_out_ratio(&q, &deq, b, a)?);
    ensure(split <= 3.0, || {
        format!("held-out/fit MSE {split:.3} between calibration halves")
    })?;
    let (fresh, _) = fixtures::draws(fixtures::HELD_OUT_SEED, xs.len());
    let drawn = held_out_ratio(&q, &deq, &xs, &fresh)?;
    let with_res = rows.iter().filter(|r| r.mse_residual.is_some()).count();
    Ok(format!(
        "{} layers ({with_res} with residual); worst held-out/fit between halves {split:.3}; on fresh draws {drawn:.3} (report only)",
        rows.len()
    ))
}

fn agreement(m: &NetworkModel, q: &QuantizedModel, xs: &[Tensor]) -> Result<f64, String> {
    let out = forward_quant_batch(q, xs, ForwardMode::IntegerExact).map_err(|e| e.to_string())?;
    let mut hits = 0usize;
    for (x, o) in xs.iter().zip(&out) {
        let r = forward_fp(m, x, false).map_err(|e| e.to_string())?.output;
        hits += (argmax(r.data()) == argmax(o.data())) as usize;
    }
    Ok(hits as f64 / xs.len() as f64)
}

fn pipeline(
    m: &NetworkModel,
    calib: &[Tensor],
    wcfg: &WeightQuantConfig,
    ccfg: &CalibConfig,
) -> Result<QuantizedModel, String> {
    let q = quantize_weights(m, wcfg).map_err(|e| e.to_string())?;
    let (rq, _) = refine_scales(m, &q, calib, &RefineConfig::default()).map_err(|e| e.to_string())?;
    let (cq, _) = calibrate_model(&rq, calib, ccfg).map_err(|e| e.to_string())?;
    Ok(cq)
}

fn c11_end_to_end() -> Outcome {
    let m = container::load_model(&fixtures::trained_path()).map_err(|e| e.to_string())?;
    let xs = calib::load(&fixtures::calib_path()).map_err(|e| e.to_string())?.samples;
    let (held, _) = fixtures::draws(fixtures::HELD_OUT_SEED, 1000);
    let ours = pipeline(&m, &xs, &WeightQuantConfig::default(), &CalibConfig::default())?;
    let base = pipeline(
        &m,
        &xs,
        &WeightQuantConfig {
            method: Method::Uniform,
            conv_partitioning: Partitioning::Global,
            ..Default::default()
        },
        &CalibConfig {
            method: MethodKind::Uniform,
            ..Default::default()
        },
    )?;
    let (a, b) = (agreement(&m, &ours, &held)?, agreement(&m, &base, &held)?);
    let line = format!("agreement omse pipeline {a:.3}, uniform/global pipeline {b:.3}");
    ensure(a >= 0.9 && b < a, || line.clone())?;
    Ok(line)
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qnet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("qnet {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

/// Runs the full command sequence into `dir` and returns every file written.
fn cli_session(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let p = |n: &str| dir.join(n).to_string_lossy().into_owned();
    let trained = fixtures::trained_path().to_string_lossy().into_owned();
    let cal = fixtures::calib_path().to_string_lossy().into_owned();
    run_cli(&["quantize", &trained, &p("q.qnet")])?;
    run_cli(&[
        "refine",
        &trained,
        &p("q.qnet"),
        &cal,
        "--epochs",
        "3",
        "-o",
        &p("r.qnet"),
    ])?;
    run_cli(&["calibrate", &p("r.qnet"), &cal, "-o", &p("c.qnet")])?;
    run_cli(&[
        "report",
        &p("c.qnet"),
        "--out-dir",
        &p(""),
        "--curve",
        "3:5",
        "--landscape",
        "0:2",
        "--dual-grid",
        "30",
        "--scales",
        "--compression",
    ])?;
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(e.path()).map_err(|e| e.to_string())?;
        files.insert(e.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}

fn c12_round_trip() -> Outcome {
    for path in [fixtures::seeded_path(), fixtures::trained_path()] {
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let again = container::encode(&container::decode(&bytes).map_err(|e| e.to_string())?);
        ensure(again == bytes, || format!("{} is not byte-stable", path.display()))?;
    }
    let bytes = std::fs::read(fixtures::calib_path()).map_err(|e| e.to_string())?;
    let again = calib::encode(&calib::decode(&bytes).map_err(|e| e.to_string())?);
    ensure(again == bytes, || "calibration file is not byte-stable".into())?;

    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fa = cli_session(a.path())?;
    let fb = cli_session(b.path())?;
    ensure(fa.keys().eq(fb.keys()), || {
        format!("file sets differ: {:?} vs {:?}", fa.keys(), fb.keys())
    })?;
    for (name, bytes) in &fa {
        ensure(&fb[name] == bytes, || format!("{name} differs between runs"))?;
        if name.ends_with(".qnet") {
            let c = container::decode(bytes).map_err(|e| format!("{name}: {e}"))?;
            ensure(&container::encode(&c) == bytes, || format!("{name} is not byte-stable"))?;
            ensure(matches!(c, Container::Quantized(_)), || {
                format!("{name} holds no quantization")
            })?;
        }
    }
    Ok(format!(
        "3 fixtures byte-stable; {} CLI outputs identical across runs",
        fa.len()
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("omse never worse than uniform", c1_omse_dominance),
        ("omse grid matches dense and brute-force oracles", c2_omse_vs_oracle),
        ("method ordering", c3_method_ordering),
        ("two-term dominance chain", c4_dual_chain),
        ("kernel-wise dominance", c5_kernel_wise),
        ("compression ratio", c6_compression),
        ("integer path linearity", c7_linearity),
        ("recursive error bound", c8_bound),
        ("scale refinement", c9_refinement),
        ("activation residual", c10_residual),
        ("end-to-end agreement", c11_end_to_end),
        ("round-trip and determinism", c12_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
