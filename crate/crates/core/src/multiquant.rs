//! Approximating one tensor by a sum of low-bit quantized tensors.
//!
//! `T ≈ Σ_i alpha_i Q_i`. The general case fits terms by alternating
//! residual fitting; for two terms a joint grid over `(alpha_1, alpha_2)` with
//! per-element enumeration of the first term's integers is exact up to the
//! grid.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quantizer::{alpha_grid, alpha_max, quantize_tensor, Method, QuantResult};
use crate::tensor::{dequant_value, mse, project_value, QuantScheme, QuantizedTensor, Tensor};

/// Relative MSE decrease below which alternating sweeps stop.
pub const DEFAULT_EPS: f64 = 1e-4;
/// Sweep cap for alternating multi-quantization.
pub const DEFAULT_MAX_SWEEPS: usize = 50;
/// Points per axis of the dual scale grid.
pub const DUAL_GRID_POINTS: usize = 100;
/// Key-layer threshold on the weighted mean per-element MSE.
pub const DEFAULT_TAU: f64 = 8e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiQuantResult {
    pub terms: Vec<QuantizedTensor>,
    pub mse: f64,
    /// Alternating sweeps performed (1 for the dual grid search).
    pub iterations: usize,
    pub converged: bool,
}

impl MultiQuantResult {
    pub fn reconstruct(&self) -> Tensor {
        reconstruct(&self.terms)
    }
}

/// `Σ_i dequantize(terms[i])`, summed in term order in f32.
pub fn reconstruct(terms: &[QuantizedTensor]) -> Tensor {
    let shape = terms[0].shape().to_vec();
    let mut acc = vec![0.0f32; terms[0].len()];
    for q in terms {
        for (a, &v) in acc.iter_mut().zip(q.values()) {
            *a += dequant_value(v, q.alpha(), q.delta(), q.gamma());
        }
    }
    Tensor::new(shape, acc).expect("terms share one shape")
}

/// OMSE mapping with `grid_points`, using the all-zero convention so exact
/// residuals do not fail.
pub fn omse_mapping(grid_points: usize) -> impl Fn(&Tensor, QuantScheme) -> Result<QuantResult> + Sync {
    move |t, s| quantize_tensor(t, s, &Method::Omse { grid_points })
}

/// Alternating optimization over `n = schemes.len()` terms.
///
/// Terms start at zero; sweep `j` refits term `j` to `T - Σ_{i≠j} term_i`
/// with `mapping`. A refit that would raise the total MSE is discarded, so
/// the total MSE never increases. Stops when a sweep improves the MSE by less
/// than `eps` relative, or after `max_sweeps`.
pub fn alternating_multi_quantize<F>(
    t: &Tensor,
    schemes: &[QuantScheme],
    mapping: F,
    eps: f64,
    max_sweeps: usize,
) -> Result<MultiQuantResult>
where
    F: Fn(&Tensor, QuantScheme) -> Result<QuantResult>,
{
    alternating_multi_quantize_traced(t, schemes, mapping, eps, max_sweeps).map(|(r, _)| r)
}

/// Like [`alternating_multi_quantize`], also returning the total MSE after
/// each sweep, preceded by the initial (all-zero) MSE.
pub fn alternating_multi_quantize_traced<F>(
    t: &Tensor,
    schemes: &[QuantScheme],
    mapping: F,
    eps: f64,
    max_sweeps: usize,
) -> Result<(MultiQuantResult, Vec<f64>)>
where
    F: Fn(&Tensor, QuantScheme) -> Result<QuantResult>,
{
    if schemes.is_empty() {
        return Err(Error::InvalidArgument("empty scheme list".into()));
    }
    if max_sweeps < 1 {
        return Err(Error::InvalidArgument("max_sweeps must be at least 1".into()));
    }
    t.check_finite()?;
    let shape = t.shape().to_vec();
    let mut terms: Vec<QuantizedTensor> = schemes
        .iter()
        .map(|&s| QuantizedTensor::zero(shape.clone(), s))
        .collect();
    let mut current = mse(t, &reconstruct(&terms))?;
    let mut trace = vec![current];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_sweeps {
        iterations += 1;
        let before = current;
        for j in 0..terms.len() {
            let others: Vec<QuantizedTensor> = terms
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, q)| q.clone())
                .collect();
            let residual = if others.is_empty() {
                t.clone()
            } else {
                t.sub(&reconstruct(&others))?
            };
            let fitted = mapping(&residual, schemes[j])?;
            let mut trial = terms.clone();
            trial[j] = fitted.quantized;
            let trial_mse = mse(t, &reconstruct(&trial))?;
            if trial_mse <= current {
                terms = trial;
                current = trial_mse;
            }
        }
        trace.push(current);
        if current == 0.0 || before - current <= eps * before {
            converged = true;
            break;
        }
    }
    Ok((
        MultiQuantResult {
            terms,
            mse: current,
            iterations,
            converged,
        },
        trace,
    ))
}

/// Exact dual search on a joint `grid_points × grid_points` grid.
///
/// For each scale pair and element, every first-term integer is tried and the
/// second term takes the projection of the remaining residual; the
/// per-element minimizer is kept. Cost is
/// `O(grid² · 2^(p1+p2) · log |T|)` for screening plus exact rescoring of
/// the pairs near the minimum.
pub fn dual_line_search(
    t: &Tensor,
    scheme1: QuantScheme,
    scheme2: QuantScheme,
    grid_points: usize,
) -> Result<MultiQuantResult> {
    dual_line_search_seeded(t, scheme1, scheme2, grid_points, &[])
}

/// [`dual_line_search`] with extra `(alpha_1, alpha_2)` pairs evaluated
/// alongside the grid, e.g. the scales of an alternating solution.
pub fn dual_line_search_seeded(
    t: &Tensor,
    scheme1: QuantScheme,
    scheme2: QuantScheme,
    grid_points: usize,
    seeds: &[(f64, f64)],
) -> Result<MultiQuantResult> {
    if grid_points < 2 {
        return Err(Error::GridTooSmall(grid_points));
    }
    if scheme1.has_offset() || scheme2.has_offset() {
        return Err(Error::InvalidScheme(
            "dual line search supports offset-free schemes only".into(),
        ));
    }
    t.check_finite()?;
    for s in [scheme1, scheme2] {
        if !s.is_signed() && t.min() < 0.0 {
            return Err(Error::NegativeInput(t.min()));
        }
    }
    let shape = t.shape().to_vec();
    if t.is_all_zero() {
        let terms = vec![
            QuantizedTensor::zero(shape.clone(), scheme1),
            QuantizedTensor::zero(shape, scheme2),
        ];
        return Ok(MultiQuantResult {
            terms,
            mse: 0.0,
            iterations: 1,
            converged: true,
        });
    }

    let grid1 = alpha_grid(alpha_max(t, 0.0, scheme1), grid_points);
    let grid2 = alpha_grid(alpha_max(t, 0.0, scheme2), grid_points);
    let data = t.data();

    let mut best = screened_search(data, &grid1, &grid2, scheme1, scheme2);
    for &(a1, a2) in seeds {
        if !(a1 > 0.0 && a2 > 0.0 && a1.is_finite() && a2.is_finite()) {
            continue;
        }
        let sse = dual_sse(data, a1, a2, scheme1, scheme2);
        if sse < best.2 || (sse == best.2 && (a1, a2) < (best.0, best.1)) {
            best = (a1, a2, sse);
        }
    }

    let (a1, a2, _) = best;
    let mut v1 = Vec::with_capacity(data.len());
    let mut v2 = Vec::with_capacity(data.len());
    for &x in data {
        let (t1, t2, _) = best_pair(x, a1, a2, scheme1, scheme2);
        v1.push(t1);
        v2.push(t2);
    }
    let terms = vec![
        QuantizedTensor::new(shape.clone(), v1, a1, 0.0, 1.0, scheme1)?,
        QuantizedTensor::new(shape, v2, a2, 0.0, 1.0, scheme2)?,
    ];
    let mse = mse(t, &reconstruct(&terms))?;
    Ok(MultiQuantResult {
        terms,
        mse,
        iterations: 1,
        converged: true,
    })
}

/// Screens the grid with the sorted-data estimate, then scores every pair
/// near the estimated minimum exactly, in row-major order.
fn screened_search(data: &[f32], grid1: &[f64], grid2: &[f64], s1: QuantScheme, s2: QuantScheme) -> (f64, f64, f64) {
    let sorted = SortedData::new(data);
    // Equal schemes and grids give the same level set for (a, b) and (b, a).
    let mirror = s1 == s2 && grid1 == grid2;
    let mut rows: Vec<Vec<f64>> = grid1
        .par_iter()
        .enumerate()
        .map_init(Vec::new, |buf, (i, &a1)| {
            let from = if mirror { i } else { 0 };
            let mut row = vec![f64::NAN; from];
            row.extend(grid2[from..].iter().map(|&a2| sorted.estimate(a1, a2, s1, s2, buf)));
            row
        })
        .collect();
    if mirror {
        for i in 0..rows.len() {
            for k in 0..i {
                rows[i][k] = rows[k][i];
            }
        }
    }
    let floor = rows.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let cutoff = floor * (1.0 + SCREEN_SLACK) + f64::MIN_POSITIVE;
    let candidates: Vec<(usize, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, &e)| e <= cutoff)
                .map(move |(k, _)| (i, k))
        })
        .collect();
    let exact: Vec<f64> = candidates
        .par_iter()
        .map(|&(i, k)| dual_sse(data, grid1[i], grid2[k], s1, s2))
        .collect();
    let mut best = (f64::NAN, f64::NAN, f64::INFINITY);
    for (&(i, k), &sse) in candidates.iter().zip(&exact) {
        if sse < best.2 {
            best = (grid1[i], grid2[k], sse);
        }
    }
    best
}

/// Per-element optimum `(t1, t2, squared error)` for fixed scales; ties keep
/// the smallest `t1`.
#[inline]
fn best_pair(x: f32, a1: f64, a2: f64, s1: QuantScheme, s2: QuantScheme) -> (i32, i32, f64) {
    let (lo1, hi1) = s1.range();
    let (lo2, hi2) = s2.range();
    let xf = x as f64;
    let mut best = (lo1, lo2, f64::INFINITY);
    for t1 in lo1..=hi1 {
        let first = dequant_value(t1, a1, 0.0, 1.0);
        let t2 = project_value(x - first, a2, 0.0, lo2, hi2);
        let recon = first + dequant_value(t2, a2, 0.0, 1.0);
        let d = xf - recon as f64;
        let e = d * d;
        if e < best.2 {
            best = (t1, t2, e);
        }
    }
    best
}

fn dual_sse(data: &[f32], a1: f64, a2: f64, s1: QuantScheme, s2: QuantScheme) -> f64 {
    data.iter().map(|&x| best_pair(x, a1, a2, s1, s2).2).sum()
}

/// Tensors up to this size are screened by a per-element scan instead of
/// the sorted level set.
const SCAN_LIMIT: usize = 160;

/// Relative margin above the estimated minimum within which grid pairs are
/// rescored exactly. The estimate reconstructs in f64 while the exact score
/// rounds through f32, which moves sums by far less than this.
const SCREEN_SLACK: f64 = 1e-3;

/// Sorted data with prefix sums of `x` and `x²`. The per-element optimum of
/// a scale pair is the squared distance to the nearest reconstructable
/// value, so a pair's error is a sum over the Voronoi cells of those values.
struct SortedData {
    xs: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl SortedData {
    fn new(data: &[f32]) -> Self {
        let mut xs: Vec<f64> = data.iter().map(|&x| x as f64).collect();
        xs.sort_by(f64::total_cmp);
        let mut s1 = Vec::with_capacity(xs.len() + 1);
        let mut s2 = Vec::with_capacity(xs.len() + 1);
        let (mut a, mut b) = (0.0, 0.0);
        s1.push(0.0);
        s2.push(0.0);
        for &x in &xs {
            a += x;
            b += x * x;
            s1.push(a);
            s2.push(b);
        }
        Self { xs, s1, s2 }
    }

    /// Small tensors scan the first-term levels per element; larger ones
    /// sum over the cells of the sorted level set.
    fn estimate(&self, a1: f64, a2: f64, sc1: QuantScheme, sc2: QuantScheme, levels: &mut Vec<f64>) -> f64 {
        if self.xs.len() <= SCAN_LIMIT {
            self.scan(a1, a2, sc1, sc2)
        } else {
            self.sse(a1, a2, sc1, sc2, levels)
        }
    }

    fn scan(&self, a1: f64, a2: f64, sc1: QuantScheme, sc2: QuantScheme) -> f64 {
        let (lo1, hi1) = sc1.range();
        let (lo2, hi2) = sc2.range();
        let inv = 1.0 / a2;
        self.xs
            .iter()
            .map(|&x| {
                (lo1..=hi1)
                    .map(|t1| {
                        let r = x - a1 * t1 as f64;
                        let q = r * inv;
                        let t2 = ((q + 0.5f64.copysign(q)) as i32).clamp(lo2, hi2);
                        (r - a2 * t2 as f64).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }

    fn sse(&self, a1: f64, a2: f64, sc1: QuantScheme, sc2: QuantScheme, levels: &mut Vec<f64>) -> f64 {
        let (lo1, hi1) = sc1.range();
        let (lo2, hi2) = sc2.range();
        levels.clear();
        for t1 in lo1..=hi1 {
            for t2 in lo2..=hi2 {
                levels.push(a1 * t1 as f64 + a2 * t2 as f64);
            }
        }
        levels.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite levels"));
        let mut start = 0;
        let mut total = 0.0;
        for (j, &v) in levels.iter().enumerate() {
            let end = match levels.get(j + 1) {
                Some(&next) => {
                    let mid = 0.5 * (v + next);
                    start + self.xs[start..].partition_point(|&x| x < mid)
                }
                None => self.xs.len(),
            };
            if end > start {
                let n = (end - start) as f64;
                let sx = self.s1[end] - self.s1[start];
                let sxx = self.s2[end] - self.s2[start];
                total += (sxx - 2.0 * v * sx + n * v * v).max(0.0);
            }
            start = end;
        }
        total
    }
}

/// MSE of the full dual grid, row-major `(alpha_1, alpha_2, mse)`, for
/// landscape dumps.
pub fn dual_landscape(
    t: &Tensor,
    scheme1: QuantScheme,
    scheme2: QuantScheme,
    grid_points: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    if grid_points < 2 {
        return Err(Error::GridTooSmall(grid_points));
    }
    t.check_finite()?;
    if t.is_all_zero() {
        return Err(Error::ZeroTensor);
    }
    let grid1 = alpha_grid(alpha_max(t, 0.0, scheme1), grid_points);
    let grid2 = alpha_grid(alpha_max(t, 0.0, scheme2), grid_points);
    let n = t.len() as f64;
    let data = t.data();
    Ok(grid1
        .par_iter()
        .flat_map_iter(|&a1| {
            grid2
                .iter()
                .map(move |&a2| (a1, a2, dual_sse(data, a1, a2, scheme1, scheme2) / n))
        })
        .collect())
}

/// Layers whose MSE exceeds `tau`.
pub fn select_key_layers(per_layer_mse: &BTreeMap<usize, f64>, tau: f64) -> BTreeSet<usize> {
    per_layer_mse
        .iter()
        .filter(|&(_, &m)| m > tau)
        .map(|(&l, _)| l)
        .collect()
}
