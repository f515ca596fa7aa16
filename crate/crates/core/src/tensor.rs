//! Dense f32 tensors and the primitive quantize / dequantize operators.
//!
//! A real tensor `T` is approximated by `gamma * alpha * Q + delta`, where `Q`
//! holds integers from the range of a [`QuantScheme`]. Projection rounds half
//! away from zero and saturates at the range endpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::EmptyExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Fails on the first NaN or infinite element.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

/// Bit width plus signedness and offset flags; defines the integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SchemeFields")]
pub struct QuantScheme {
    bits: u8,
    signed: bool,
    offset: bool,
}

#[derive(Deserialize)]
struct SchemeFields {
    bits: u8,
    signed: bool,
    offset: bool,
}

impl TryFrom<SchemeFields> for QuantScheme {
    type Error = Error;

    fn try_from(f: SchemeFields) -> Result<Self> {
        Self::new(f.bits, f.signed, f.offset)
    }
}

impl QuantScheme {
    /// Widths from 1 to 8 bits. An offset is only meaningful for the
    /// unsigned range, so `signed && offset` is rejected.
    pub fn new(bits: u8, signed: bool, offset: bool) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidScheme(format!("bit width {bits} outside 1..=8")));
        }
        if signed && offset {
            return Err(Error::InvalidScheme("offset requires an unsigned range".into()));
        }
        Ok(Self { bits, signed, offset })
    }

    /// Signed, no offset. Panics on widths outside 1..=8.
    pub fn signed(bits: u8) -> Self {
        Self::new(bits, true, false).expect("bit width in 1..=8")
    }

    /// Unsigned without offset, for provably non-negative data.
    pub fn unsigned(bits: u8) -> Self {
        Self::new(bits, false, false).expect("bit width in 1..=8")
    }

    /// Unsigned with an additive offset.
    pub fn with_offset(bits: u8) -> Self {
        Self::new(bits, false, true).expect("bit width in 1..=8")
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn has_offset(&self) -> bool {
        self.offset
    }

    /// Closed integer interval `(lo, hi)`.
    pub fn range(&self) -> (i32, i32) {
        let p = self.bits as u32;
        if self.signed {
            (-(1i32 << (p - 1)), (1i32 << (p - 1)) - 1)
        } else {
            (0, (1i32 << p) - 1)
        }
    }

    /// Largest integer magnitude used to map `max |T - delta|` onto the
    /// grid. Only the 1-bit signed range `{-1, 0}` uses the negative end.
    pub(crate) fn scale_divisor(&self) -> f64 {
        let (lo, hi) = self.range();
        if hi > 0 {
            hi as f64
        } else {
            (-lo) as f64
        }
    }
}

/// Closed integer interval of `scheme`.
pub fn quant_range(scheme: QuantScheme) -> (i32, i32) {
    scheme.range()
}

/// Integer tensor with the affine map back to reals.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    values: Vec<i32>,
    alpha: f64,
    delta: f64,
    gamma: f64,
    scheme: QuantScheme,
}

impl QuantizedTensor {
    pub fn new(
        shape: Vec<usize>,
        values: Vec<i32>,
        alpha: f64,
        delta: f64,
        gamma: f64,
        scheme: QuantScheme,
    ) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeDataMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidScale(alpha));
        }
        if !delta.is_finite() || (!scheme.has_offset() && delta != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "offset {delta} not allowed for scheme {scheme:?}"
            )));
        }
        if !gamma.is_finite() {
            return Err(Error::InvalidScale(gamma));
        }
        let (lo, hi) = scheme.range();
        if let Some(&value) = values.iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::OutOfRange { value, lo, hi });
        }
        Ok(Self {
            shape,
            values,
            alpha,
            delta,
            gamma,
            scheme,
        })
    }

    /// All-zero tensor with unit scale; the reconstruction is exactly zero.
    pub fn zero(shape: Vec<usize>, scheme: QuantScheme) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0; n],
            alpha: 1.0,
            delta: 0.0,
            gamma: 1.0,
            scheme,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    pub fn with_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::ShapeDataMismatch {
                shape,
                expected: n,
                actual: self.values.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Sum of the integer values, used for offset corrections.
    pub fn value_sum(&self) -> i64 {
        self.values.iter().map(|&v| v as i64).sum()
    }
}

#[inline]
pub(crate) fn project_value(x: f32, alpha: f64, delta: f64, lo: i32, hi: i32) -> i32 {
    let r = ((x as f64 - delta) / alpha).round();
    r.clamp(lo as f64, hi as f64) as i32
}

#[inline]
pub(crate) fn dequant_value(v: i32, alpha: f64, delta: f64, gamma: f64) -> f32 {
    (gamma * alpha * v as f64 + delta) as f32
}

/// `clamp(round((T - delta) / alpha), lo, hi)` elementwise with `gamma = 1`.
pub fn project(t: &Tensor, alpha: f64, delta: f64, scheme: QuantScheme) -> Result<QuantizedTensor> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidScale(alpha));
    }
    t.check_finite()?;
    let (lo, hi) = scheme.range();
    let delta = if scheme.has_offset() { delta } else { 0.0 };
    let values = t
        .data()
        .iter()
        .map(|&x| project_value(x, alpha, delta, lo, hi))
        .collect();
    QuantizedTensor::new(t.shape().to_vec(), values, alpha, delta, 1.0, scheme)
}

/// `gamma * alpha * values + delta`, evaluated left to right in f64 and
/// stored as f32.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q
        .values
        .iter()
        .map(|&v| dequant_value(v, q.alpha, q.delta, q.gamma))
        .collect();
    Tensor {
        shape: q.shape.clone(),
        data,
    }
}

/// Mean squared elementwise difference, accumulated in f64.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(mse_slices(&a.data, &b.data))
}

pub(crate) fn mse_slices(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        sum += d * d;
    }
    sum / a.len() as f64
}

/// Reconstruction MSE of `project(t, alpha, delta)` with unit gamma, without
/// materializing the integer tensor. Bit-identical to
/// `mse(t, dequantize(project(t, alpha, delta, scheme)))`.
pub(crate) fn projection_mse(data: &[f32], alpha: f64, delta: f64, scheme: QuantScheme) -> f64 {
    let (lo, hi) = scheme.range();
    let mut sum = 0.0f64;
    for &x in data {
        let v = project_value(x, alpha, delta, lo, hi);
        let d = x as f64 - dequant_value(v, alpha, delta, 1.0) as f64;
        sum += d * d;
    }
    sum / data.len() as f64
}
