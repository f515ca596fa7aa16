//! Single-tensor scale search.
//!
//! Every method returns the pair `(alpha, Q)` approximating `T` by
//! `alpha * Q + delta`. For a fixed `alpha` the best integers are the rounded,
//! saturated quotients, so each search is a one-dimensional problem over
//! `alpha`. Offset schemes pin `delta = min(T)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dequantize, mse, project, projection_mse, QuantScheme, QuantizedTensor, Tensor};

/// Default grid for weight tensors.
pub const WEIGHT_GRID_POINTS: usize = 500;
/// Default grid for activation tensors.
pub const ACTIVATION_GRID_POINTS: usize = 50;
/// Default golden-section termination width, relative to `alpha_max`.
pub const GOLDEN_TOLERANCE: f64 = 1e-4;
/// Default iteration cap of the alternating baseline.
pub const ALTERNATING_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Uniform,
    Omse,
    Golden,
    Alternating,
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MethodKind::Uniform => "uniform",
            MethodKind::Omse => "omse",
            MethodKind::Golden => "golden",
            MethodKind::Alternating => "alternating",
        };
        f.write_str(s)
    }
}

/// A scale search together with its tuning knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    Uniform,
    Omse { grid_points: usize },
    Golden { tol: f64 },
    Alternating { max_iter: usize },
}

impl Method {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::Uniform => MethodKind::Uniform,
            Method::Omse { .. } => MethodKind::Omse,
            Method::Golden { .. } => MethodKind::Golden,
            Method::Alternating { .. } => MethodKind::Alternating,
        }
    }

    /// Method with its default knob.
    pub fn default_for(kind: MethodKind) -> Self {
        match kind {
            MethodKind::Uniform => Method::Uniform,
            MethodKind::Omse => Method::Omse {
                grid_points: WEIGHT_GRID_POINTS,
            },
            MethodKind::Golden => Method::Golden { tol: GOLDEN_TOLERANCE },
            MethodKind::Alternating => Method::Alternating {
                max_iter: ALTERNATING_MAX_ITER,
            },
        }
    }
}

/// A quantized tensor together with its reconstruction error.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub quantized: QuantizedTensor,
    /// `mse(original, dequantize(quantized))`.
    pub mse: f64,
    pub method: MethodKind,
    /// Grid size for [`MethodKind::Omse`], zero otherwise.
    pub grid_points: usize,
    /// Iterations (alternating) or objective evaluations (golden).
    pub iterations: usize,
    /// Set when the alternating iteration hit an all-zero integer tensor.
    pub warning: bool,
}

impl QuantResult {
    pub fn alpha(&self) -> f64 {
        self.quantized.alpha()
    }

    fn build(t: &Tensor, quantized: QuantizedTensor, method: MethodKind) -> Result<Self> {
        let mse = mse(t, &dequantize(&quantized))?;
        Ok(Self {
            quantized,
            mse,
            method,
            grid_points: 0,
            iterations: 0,
            warning: false,
        })
    }
}

fn check_input(t: &Tensor, scheme: QuantScheme) -> Result<()> {
    t.check_finite()?;
    if !scheme.is_signed() && !scheme.has_offset() {
        let m = t.min();
        if m < 0.0 {
            return Err(Error::NegativeInput(m));
        }
    }
    Ok(())
}

/// `min(T)` for offset schemes, zero otherwise.
pub fn offset_for(t: &Tensor, scheme: QuantScheme) -> f64 {
    if scheme.has_offset() {
        t.min() as f64
    } else {
        0.0
    }
}

/// Scale that maps the largest `|T - delta|` onto the range end, i.e. the
/// uniform scale. Zero for tensors with no spread.
pub fn alpha_max(t: &Tensor, delta: f64, scheme: QuantScheme) -> f64 {
    let spread = t.data().iter().fold(0.0f64, |m, &x| m.max((x as f64 - delta).abs()));
    spread / scheme.scale_divisor()
}

/// Result used for tensors with nothing to scale: unit alpha, all-zero
/// integers, and `delta = min(T)` for offset schemes so constants stay exact.
fn degenerate(t: &Tensor, scheme: QuantScheme, method: MethodKind) -> Result<QuantResult> {
    let delta = offset_for(t, scheme);
    let q = project(t, 1.0, delta, scheme)?;
    QuantResult::build(t, q, method)
}

/// Uniform rule: `alpha = max|T - delta| / hi`, offset `delta = min(T)`.
pub fn uniform_quantize(t: &Tensor, scheme: QuantScheme) -> Result<QuantResult> {
    check_input(t, scheme)?;
    let delta = offset_for(t, scheme);
    let alpha = alpha_max(t, delta, scheme);
    if !(alpha > 0.0) {
        return degenerate(t, scheme, MethodKind::Uniform);
    }
    let q = project(t, alpha, delta, scheme)?;
    QuantResult::build(t, q, MethodKind::Uniform)
}

/// Grid `{alpha_max * k / n : k = 1..=n}`; the last point is exactly
/// `alpha_max`.
pub fn alpha_grid(alpha_max: f64, grid_points: usize) -> Vec<f64> {
    let n = grid_points as f64;
    (1..=grid_points)
        .map(|k| alpha_max * k as f64 / n)
        .filter(|&a| a > 0.0)
        .collect()
}

/// Index of the smallest objective, ties resolved toward the smaller scale.
fn argmin(points: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for (i, &(a, m)) in points.iter().enumerate().skip(1) {
        let (ba, bm) = points[best];
        if m < bm || (m == bm && a < ba) {
            best = i;
        }
    }
    best
}

fn evaluate(data: &[f32], delta: f64, scheme: QuantScheme, alphas: &[f64]) -> Vec<(f64, f64)> {
    alphas
        .par_iter()
        .map(|&a| (a, projection_mse(data, a, delta, scheme)))
        .collect()
}

/// MSE at every grid point, in grid order. Errors for all-zero tensors.
pub fn mse_curve(t: &Tensor, scheme: QuantScheme, grid_points: usize) -> Result<Vec<(f64, f64)>> {
    if grid_points < 2 {
        return Err(Error::GridTooSmall(grid_points));
    }
    check_input(t, scheme)?;
    if t.is_all_zero() {
        return Err(Error::ZeroTensor);
    }
    let delta = offset_for(t, scheme);
    let am = alpha_max(t, delta, scheme);
    Ok(evaluate(t.data(), delta, scheme, &alpha_grid(am, grid_points)))
}

/// Exact line search of the reconstruction MSE over a uniform grid in
/// `(0, alpha_max]`.
pub fn omse_grid_search(t: &Tensor, scheme: QuantScheme, grid_points: usize) -> Result<QuantResult> {
    omse_grid_search_with(t, scheme, grid_points, &[])
}

/// [`omse_grid_search`] with extra candidate scales evaluated alongside the
/// grid.
pub fn omse_grid_search_with(
    t: &Tensor,
    scheme: QuantScheme,
    grid_points: usize,
    extra: &[f64],
) -> Result<QuantResult> {
    if grid_points < 2 {
        return Err(Error::GridTooSmall(grid_points));
    }
    check_input(t, scheme)?;
    if t.is_all_zero() {
        return Err(Error::ZeroTensor);
    }
    let delta = offset_for(t, scheme);
    let am = alpha_max(t, delta, scheme);
    if !(am > 0.0) {
        return degenerate(t, scheme, MethodKind::Omse);
    }
    let mut alphas = alpha_grid(am, grid_points);
    alphas.extend(extra.iter().copied().filter(|a| *a > 0.0 && a.is_finite()));
    let points = evaluate(t.data(), delta, scheme, &alphas);
    let (alpha, _) = points[argmin(&points)];
    let q = project(t, alpha, delta, scheme)?;
    let mut r = QuantResult::build(t, q, MethodKind::Omse)?;
    r.grid_points = grid_points;
    Ok(r)
}

/// Golden-section search over `(0, alpha_max]`, stopping once the bracket is
/// narrower than `tol * alpha_max`. The objective is not unimodal, so the
/// best point visited is returned, not the final bracket.
pub fn golden_section_quantize(t: &Tensor, scheme: QuantScheme, tol: f64) -> Result<QuantResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    check_input(t, scheme)?;
    if t.is_all_zero() {
        return Err(Error::ZeroTensor);
    }
    let delta = offset_for(t, scheme);
    let am = alpha_max(t, delta, scheme);
    if !(am > 0.0) {
        return degenerate(t, scheme, MethodKind::Golden);
    }
    let data = t.data();
    let mut visited: Vec<(f64, f64)> = Vec::new();
    let mut f = |a: f64| -> f64 {
        let a = a.max(f64::MIN_POSITIVE);
        let m = projection_mse(data, a, delta, scheme);
        visited.push((a, m));
        m
    };

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let width = tol * am;
    let (mut lo, mut hi) = (0.0f64, am);
    f(hi);
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > width {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    let (alpha, _) = visited[argmin(&visited)];
    let evaluations = visited.len();
    let q = project(t, alpha, delta, scheme)?;
    let mut r = QuantResult::build(t, q, MethodKind::Golden)?;
    r.iterations = evaluations;
    Ok(r)
}

/// Alternating baseline: project for fixed `alpha`, then refit `alpha` by
/// least squares for the fixed integers.
pub fn alternating_quantize(t: &Tensor, scheme: QuantScheme, max_iter: usize) -> Result<QuantResult> {
    alternating_quantize_traced(t, scheme, max_iter).map(|(r, _)| r)
}

/// [`alternating_quantize`] plus the accepted objective sequence, starting
/// with the uniform initialization. The sequence is non-increasing: an update
/// that would raise the objective ends the iteration instead.
pub fn alternating_quantize_traced(
    t: &Tensor,
    scheme: QuantScheme,
    max_iter: usize,
) -> Result<(QuantResult, Vec<f64>)> {
    if max_iter < 1 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    check_input(t, scheme)?;
    if t.is_all_zero() {
        return Err(Error::ZeroTensor);
    }
    let delta = offset_for(t, scheme);
    let am = alpha_max(t, delta, scheme);
    if !(am > 0.0) {
        let r = degenerate(t, scheme, MethodKind::Alternating)?;
        let trace = vec![r.mse];
        return Ok((r, trace));
    }

    let mut q = project(t, am, delta, scheme)?;
    let mut objective = mse(t, &dequantize(&q))?;
    let mut trace = vec![objective];
    let mut warning = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (&x, &v) in t.data().iter().zip(q.values()) {
            num += (x as f64 - delta) * v as f64;
            den += v as f64 * v as f64;
        }
        if den == 0.0 {
            warning = true;
            break;
        }
        let next_alpha = num / den;
        if !(next_alpha > 0.0 && next_alpha.is_finite()) {
            warning = true;
            break;
        }
        let next = project(t, next_alpha, delta, scheme)?;
        let next_obj = mse(t, &dequantize(&next))?;
        if next_obj > objective {
            break;
        }
        let change = ((next_alpha - q.alpha()) / q.alpha()).abs();
        q = next;
        objective = next_obj;
        trace.push(objective);
        if change < 1e-8 {
            break;
        }
    }
    let mut r = QuantResult::build(t, q, MethodKind::Alternating)?;
    r.iterations = iterations;
    r.warning = warning;
    Ok((r, trace))
}

/// Dispatches on `method`. All-zero tensors take the degenerate convention
/// (`alpha = 1`, integers 0, error 0) instead of failing, so pruned kernels
/// pass through the pipeline.
pub fn quantize_tensor(t: &Tensor, scheme: QuantScheme, method: &Method) -> Result<QuantResult> {
    if t.is_all_zero() {
        t.check_finite()?;
        return degenerate(t, scheme, method.kind());
    }
    match *method {
        Method::Uniform => uniform_quantize(t, scheme),
        Method::Omse { grid_points } => omse_grid_search(t, scheme, grid_points),
        Method::Golden { tol } => golden_section_quantize(t, scheme, tol),
        Method::Alternating { max_iter } => alternating_quantize(t, scheme, max_iter),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    /// Brute-force oracle: direct MSE over a dense grid, independent of the
    /// library's grid helpers.
    fn dense_scan(x: &Tensor, scheme: QuantScheme, am: f64, n: usize) -> (f64, f64) {
        let (lo, hi) = scheme.range();
        let mut best = (0.0f64, f64::INFINITY);
        for k in 1..=n {
            let a = am * k as f64 / n as f64;
            let m = x
                .data()
                .iter()
                .map(|&v| {
                    let q = ((v as f64 / a).round()).clamp(lo as f64, hi as f64);
                    (v as f64 - (a * q) as f32 as f64).powi(2)
                })
                .sum::<f64>()
                / x.len() as f64;
            if m < best.1 {
                best = (a, m);
            }
        }
        best
    }

    #[test]
    fn uniform_examples() {
        let s = QuantScheme::signed(4);
        let vals: Vec<f32> = (-7..=7).map(|k| k as f32 / 7.0).collect();
        let r = uniform_quantize(&t(&vals), s).unwrap();
        assert_eq!(r.alpha(), 1.0 / 7.0);
        assert!(r.mse < 1e-14, "{}", r.mse);

        let r = uniform_quantize(&t(&[0.0, 15.0]), QuantScheme::with_offset(4)).unwrap();
        assert_eq!((r.alpha(), r.quantized.delta()), (1.0, 0.0));
        assert_eq!(r.mse, 0.0);

        let r = uniform_quantize(&t(&[-1.0, 0.5]), s).unwrap();
        assert_eq!(r.alpha(), 1.0 / 7.0);
        assert_eq!(r.quantized.values(), &[-7, 4]);
    }

    #[test]
    fn uniform_all_zero_convention() {
        let r = uniform_quantize(&t(&[0.0, 0.0, 0.0]), QuantScheme::signed(4)).unwrap();
        assert_eq!(r.alpha(), 1.0);
        assert!(r.quantized.values().iter().all(|&v| v == 0));
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn unsigned_without_offset_rejects_negative() {
        assert!(matches!(
            uniform_quantize(&t(&[-1.0, 1.0]), QuantScheme::unsigned(4)),
            Err(Error::NegativeInput(_))
        ));
    }

    #[test]
    fn omse_errors() {
        let s = QuantScheme::signed(4);
        assert_eq!(omse_grid_search(&t(&[0.0, 0.0]), s, 10), Err(Error::ZeroTensor));
        assert_eq!(omse_grid_search(&t(&[1.0]), s, 1), Err(Error::GridTooSmall(1)));
        assert!(quantize_tensor(&t(&[0.0]), s, &Method::default_for(MethodKind::Omse)).is_ok());
    }

    #[test]
    fn omse_exact_on_grid_point() {
        // alpha_max = 7/7 = 1; alpha = 0.5 is grid point k = 250 of 500.
        let x = t(&[3.5, -0.5, 1.0, 0.0, 2.5]);
        let r = omse_grid_search(&x, QuantScheme::signed(4), 500).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.alpha(), 0.5);
    }

    #[test]
    fn omse_matches_dense_scan_on_outlier_tensor() {
        let x = t(&[1.0, 1.0, 1.0, 10.0]);
        let s = QuantScheme::signed(4);
        let r = omse_grid_search(&x, s, 500).unwrap();
        let am = 10.0f64 / 7.0;
        let (a_star, m_star) = dense_scan(&x, s, am, 50_000);
        assert!(
            (r.alpha() - a_star).abs() <= am / 500.0 + 1e-6,
            "{} vs {}",
            r.alpha(),
            a_star
        );
        assert!(r.mse <= m_star * 1.01 + 1e-12, "{} vs {}", r.mse, m_star);
    }

    #[test]
    fn golden_exact_and_two_value_tensor() {
        let s = QuantScheme::signed(4);
        // Exactly representable at alpha_max.
        let r = golden_section_quantize(&t(&[7.0, -3.0, 1.0]), s, 1e-4).unwrap();
        assert_eq!(r.mse, 0.0);

        let x = t(&[0.3, 2.0]);
        let r = golden_section_quantize(&x, s, 1e-4).unwrap();
        let am = 2.0 / 7.0;
        let (_, m_star) = dense_scan(&x, s, am, 200_000);
        assert!(r.mse <= m_star + 1e-4 * am, "{} vs {}", r.mse, m_star);
    }

    #[test]
    fn alternating_exact_converges_immediately() {
        let s = QuantScheme::signed(4);
        let (r, trace) = alternating_quantize_traced(&t(&[7.0, -3.0, 1.0]), s, 50).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.iterations, 1);
        assert_eq!(trace, vec![0.0, 0.0]);
    }

    #[test]
    fn alternating_warning_on_zero_integers() {
        // 1-bit signed: alpha_max = |-1| / 1; integers {-1, 0}; positive data
        // maps to 0 everywhere after the first refit.
        let x = t(&[0.2, 0.1]);
        let r = alternating_quantize(&x, QuantScheme::signed(1), 10).unwrap();
        assert!(r.warning);
    }

    #[test]
    fn default_grid_sizes() {
        assert_eq!(WEIGHT_GRID_POINTS, 500);
        assert_eq!(ACTIVATION_GRID_POINTS, 50);
    }

    #[test]
    fn saturation_follows_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..200)
            .map(|_| {
                let g: f32 = rng.random_range(-1.0..1.0);
                g * g * g * 5.0
            })
            .collect();
        let x = t(&data);
        let s = QuantScheme::signed(4);
        let r = omse_grid_search(&x, s, 500).unwrap();
        let (lo, hi) = s.range();
        let a = r.alpha();
        for (&v, &q) in x.data().iter().zip(r.quantized.values()) {
            if v as f64 > a * (hi as f64 + 0.5) {
                assert_eq!(q, hi);
            }
            if (v as f64) < a * (lo as f64 - 0.5) {
                assert_eq!(q, lo);
            }
        }
    }

    fn corpus_tensor() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-3f32..3.0, 1..80).prop_filter("not all zero", |v| v.iter().any(|&x| x != 0.0))
    }

    proptest! {
        #[test]
        fn omse_never_worse_than_uniform(data in corpus_tensor(), offset in any::<bool>()) {
            let x = t(&data);
            let s = if offset { QuantScheme::with_offset(4) } else { QuantScheme::signed(4) };
            let u = uniform_quantize(&x, s).unwrap();
            let o = omse_grid_search(&x, s, 100).unwrap();
            prop_assert!(o.mse <= u.mse);
        }

        #[test]
        fn omse_scale_equivariant(data in corpus_tensor(), exp in -8i32..8) {
            let x = t(&data);
            let c = 2f32.powi(exp);
            let s = QuantScheme::signed(4);
            let a = omse_grid_search(&x, s, 200).unwrap();
            let b = omse_grid_search(&x.scale(c), s, 200).unwrap();
            prop_assert_eq!(b.alpha(), a.alpha() * c as f64);
            prop_assert_eq!(a.quantized.values(), b.quantized.values());
        }

        #[test]
        fn omse_scale_equivariant_non_power_of_two(data in corpus_tensor(), c in 0.1f32..10.0) {
            let x = t(&data);
            let s = QuantScheme::signed(4);
            let a = omse_grid_search(&x, s, 200).unwrap();
            let b = omse_grid_search(&x.scale(c), s, 200).unwrap();
            let c64 = c as f64;
            let rel = ((b.alpha() - a.alpha() * c64) / (a.alpha() * c64)).abs();
            // Float rounding may move the chosen point only among near-ties.
            prop_assert!(rel < 1e-5 || (b.mse / (c as f64 * c as f64) - a.mse).abs() <= 1e-4 * a.mse.max(1e-30));
        }

        #[test]
        fn alternating_objective_non_increasing(data in corpus_tensor()) {
            let x = t(&data);
            let (r, trace) = alternating_quantize_traced(&x, QuantScheme::signed(4), 50).unwrap();
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert_eq!(*trace.last().unwrap(), r.mse);
        }

        #[test]
        fn result_mse_recomputes(data in corpus_tensor(), which in 0usize..4) {
            let x = t(&data);
            let s = QuantScheme::signed(3);
            let m = [
                Method::Uniform,
                Method::Omse { grid_points: 64 },
                Method::Golden { tol: 1e-3 },
                Method::Alternating { max_iter: 20 },
            ][which];
            let r = quantize_tensor(&x, s, &m).unwrap();
            let again = mse(&x, &dequantize(&r.quantized)).unwrap();
            prop_assert!((again - r.mse).abs() <= 1e-9 * r.mse.max(1e-300));
        }
    }
}
