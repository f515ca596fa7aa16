//! `QNET1` model containers: magic, a JSON manifest and a little-endian
//! blob.
//!
//! ```text
//! "QNET1" | u64 manifest length | manifest JSON | u64 blob length | blob
//! ```
//!
//! Full-precision tensors are stored as f32, quantized values as one byte
//! each (i8 for signed schemes, u8 otherwise). Scales live in the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use qnet_core::netmodel::{
    ActivationPlan, Conv2d, Layer, LayerQuantPlan, Linear, NetworkModel, Partitioning, Pool, QuantizedModel,
};
use qnet_core::{QuantScheme, QuantizedTensor, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, FormatError};
use crate::io::{read_file, write_atomic};

pub const MAGIC: &[u8; 5] = b"QNET1";

/// Either a full-precision model or a quantized one.
#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Model(NetworkModel),
    Quantized(QuantizedModel),
}

impl Container {
    /// The full-precision network.
    pub fn model(&self) -> &NetworkModel {
        match self {
            Container::Model(m) => m,
            Container::Quantized(q) => q.base(),
        }
    }

    pub fn quantized(&self) -> Option<&QuantizedModel> {
        match self {
            Container::Quantized(q) => Some(q),
            Container::Model(_) => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Conv2d {
        stride: usize,
        padding: usize,
        weight: BlobRef,
        bias: Option<BlobRef>,
    },
    Linear {
        weight: BlobRef,
        bias: Option<BlobRef>,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermEntry {
    bits: u8,
    signed: bool,
    offset: bool,
    alpha: f64,
    delta: f64,
    gamma: f64,
    values: BlobRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanEntry {
    partitioning: Partitioning,
    is_key_layer: bool,
    weight_mse: f64,
    weight_mse_single: f64,
    activation: ActivationPlan,
    groups: Vec<Vec<TermEntry>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantEntry {
    provenance: BTreeMap<String, String>,
    plans: Vec<Option<PlanEntry>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
    quantization: Option<QuantEntry>,
}

#[derive(Default)]
struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    fn floats(&mut self, shape: &[usize], data: &[f32]) -> BlobRef {
        let offset = self.buf.len() as u64;
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            shape: shape.to_vec(),
            offset,
            length: self.buf.len() as u64 - offset,
        }
    }

    fn ints(&mut self, q: &QuantizedTensor) -> BlobRef {
        let offset = self.buf.len() as u64;
        let signed = q.scheme().is_signed();
        self.buf.extend(
            q.values()
                .iter()
                .map(|&v| if signed { (v as i8) as u8 } else { v as u8 }),
        );
        BlobRef {
            shape: q.shape().to_vec(),
            offset,
            length: self.buf.len() as u64 - offset,
        }
    }
}

fn layer_entry(layer: &Layer, blob: &mut BlobWriter) -> LayerEntry {
    let bias = |b: &Option<Vec<f32>>, blob: &mut BlobWriter| b.as_ref().map(|b| blob.floats(&[b.len()], b));
    match layer {
        Layer::Conv2d(c) => {
            let weight = blob.floats(c.weight.shape(), c.weight.data());
            LayerEntry::Conv2d {
                stride: c.stride,
                padding: c.padding,
                weight,
                bias: bias(&c.bias, blob),
            }
        }
        Layer::Linear(l) => {
            let weight = blob.floats(l.weight.shape(), l.weight.data());
            LayerEntry::Linear {
                weight,
                bias: bias(&l.bias, blob),
            }
        }
        Layer::Relu => LayerEntry::Relu,
        Layer::MaxPool(p) => LayerEntry::MaxPool {
            window: p.window,
            stride: p.stride,
        },
        Layer::AvgPool(p) => LayerEntry::AvgPool {
            window: p.window,
            stride: p.stride,
        },
        Layer::Flatten => LayerEntry::Flatten,
    }
}

fn plan_entry(plan: &LayerQuantPlan, blob: &mut BlobWriter) -> PlanEntry {
    let groups = plan
        .weight_terms
        .iter()
        .map(|g| {
            g.iter()
                .map(|q| TermEntry {
                    bits: q.scheme().bits(),
                    signed: q.scheme().is_signed(),
                    offset: q.scheme().has_offset(),
                    alpha: q.alpha(),
                    delta: q.delta(),
                    gamma: q.gamma(),
                    values: blob.ints(q),
                })
                .collect()
        })
        .collect();
    PlanEntry {
        partitioning: plan.partitioning,
        is_key_layer: plan.is_key_layer,
        weight_mse: plan.weight_mse,
        weight_mse_single: plan.weight_mse_single,
        activation: plan.activation,
        groups,
    }
}

/// Serializes a container. Equal containers give equal bytes.
pub fn encode(c: &Container) -> Vec<u8> {
    let model = c.model();
    let mut blob = BlobWriter::default();
    let layers = model.layers().iter().map(|l| layer_entry(l, &mut blob)).collect();
    let quantization = c.quantized().map(|q| QuantEntry {
        provenance: q.provenance().clone(),
        plans: q
            .plans()
            .iter()
            .map(|p| p.as_ref().map(|p| plan_entry(p, &mut blob)))
            .collect(),
    });
    let manifest = Manifest {
        input_shape: model.input_shape().to_vec(),
        layers,
        quantization,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + json.len() + blob.buf.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blob.buf.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob.buf);
    out
}

/// Reads a little-endian u64 at `at`.
pub(crate) fn read_u64(bytes: &[u8], at: usize, what: &str) -> Result<u64, FormatError> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| FormatError::new(at as u64, format!("truncated {what}")))
}

struct BlobReader<'a> {
    blob: &'a [u8],
    /// File offset of the first blob byte.
    base: u64,
    /// File offset of the manifest, for errors without a blob position.
    manifest: u64,
}

impl BlobReader<'_> {
    fn slice(&self, r: &BlobRef, elem: u64, what: &str) -> Result<&[u8], FormatError> {
        let count: u64 = r.shape.iter().map(|&d| d as u64).product();
        if r.length != count * elem {
            return Err(FormatError::new(
                self.base + r.offset,
                format!("{what}: length {} does not match shape {:?}", r.length, r.shape),
            ));
        }
        let end = r.offset.checked_add(r.length).filter(|&e| e <= self.blob.len() as u64);
        match end {
            Some(end) => Ok(&self.blob[r.offset as usize..end as usize]),
            None => Err(FormatError::new(
                self.base + self.blob.len() as u64,
                format!("{what}: range {}+{} exceeds the blob", r.offset, r.length),
            )),
        }
    }

    fn floats(&self, r: &BlobRef, what: &str) -> Result<Tensor, FormatError> {
        let bytes = self.slice(r, 4, what)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::new(
                self.base + r.offset + 4 * i as u64,
                format!("{what}: non-finite value"),
            ));
        }
        Tensor::new(r.shape.clone(), data).map_err(|e| FormatError::new(self.base + r.offset, format!("{what}: {e}")))
    }

    fn bias(&self, r: &Option<BlobRef>, what: &str) -> Result<Option<Vec<f32>>, FormatError> {
        r.as_ref()
            .map(|r| self.floats(r, what).map(Tensor::into_data))
            .transpose()
    }

    fn term(&self, t: &TermEntry, what: &str) -> Result<QuantizedTensor, FormatError> {
        let scheme = QuantScheme::new(t.bits, t.signed, t.offset).map_err(|e| self.invalid(what, e))?;
        let bytes = self.slice(&t.values, 1, what)?;
        let (lo, hi) = scheme.range();
        let mut values = Vec::with_capacity(bytes.len());
        for (i, &b) in bytes.iter().enumerate() {
            let v = if t.signed { b as i8 as i32 } else { b as i32 };
            if v < lo || v > hi {
                return Err(FormatError::new(
                    self.base + t.values.offset + i as u64,
                    format!("{what}: value {v} outside [{lo}, {hi}]"),
                ));
            }
            values.push(v);
        }
        QuantizedTensor::new(t.values.shape.clone(), values, t.alpha, t.delta, t.gamma, scheme)
            .map_err(|e| self.invalid(what, e))
    }

    fn invalid(&self, what: &str, e: impl std::fmt::Display) -> FormatError {
        FormatError::new(self.manifest, format!("{what}: {e}"))
    }
}

fn json_offset(text: &[u8], e: &serde_json::Error) -> u64 {
    let mut line = 1;
    let mut start = 0;
    for (i, &b) in text.iter().enumerate() {
        if line == e.line() {
            break;
        }
        if b == b'\n' {
            line += 1;
            start = i + 1;
        }
    }
    (start + e.column().saturating_sub(1)) as u64
}

/// Parses and validates a container.
pub fn decode(bytes: &[u8]) -> Result<Container, FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::new(0, "missing QNET1 magic"));
    }
    let mlen = read_u64(bytes, 5, "manifest length")?;
    let mstart = 13usize;
    let mend = mstart
        .checked_add(mlen as usize)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| FormatError::new(5, format!("manifest length {mlen} exceeds the file")))?;
    let text = &bytes[mstart..mend];
    let manifest: Manifest = serde_json::from_slice(text)
        .map_err(|e| FormatError::new(mstart as u64 + json_offset(text, &e), format!("manifest: {e}")))?;
    let blen = read_u64(bytes, mend, "blob length")?;
    let bstart = mend + 8;
    let bend = bstart
        .checked_add(blen as usize)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| FormatError::new(mend as u64, format!("blob length {blen} exceeds the file")))?;
    if bend != bytes.len() {
        return Err(FormatError::new(bend as u64, "trailing bytes after the blob"));
    }
    let rd = BlobReader {
        blob: &bytes[bstart..bend],
        base: bstart as u64,
        manifest: mstart as u64,
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let layer = match entry {
            LayerEntry::Conv2d {
                stride,
                padding,
                weight,
                bias,
            } => Layer::Conv2d(Conv2d {
                weight: rd.floats(weight, &format!("layer {i} weight"))?,
                bias: rd.bias(bias, &format!("layer {i} bias"))?,
                stride: *stride,
                padding: *padding,
            }),
            LayerEntry::Linear { weight, bias } => Layer::Linear(Linear {
                weight: rd.floats(weight, &format!("layer {i} weight"))?,
                bias: rd.bias(bias, &format!("layer {i} bias"))?,
            }),
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::MaxPool { window, stride } => Layer::MaxPool(Pool {
                window: *window,
                stride: *stride,
            }),
            LayerEntry::AvgPool { window, stride } => Layer::AvgPool(Pool {
                window: *window,
                stride: *stride,
            }),
            LayerEntry::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    let model = NetworkModel::new(manifest.input_shape.clone(), layers).map_err(|e| rd.invalid("model", e))?;

    let Some(quant) = manifest.quantization else {
        return Ok(Container::Model(model));
    };
    let mut plans = Vec::with_capacity(quant.plans.len());
    for (i, entry) in quant.plans.iter().enumerate() {
        let Some(p) = entry else {
            plans.push(None);
            continue;
        };
        let mut weight_terms = Vec::with_capacity(p.groups.len());
        for (g, group) in p.groups.iter().enumerate() {
            let terms = group
                .iter()
                .enumerate()
                .map(|(t, term)| rd.term(term, &format!("layer {i} group {g} term {t}")))
                .collect::<Result<Vec<_>, _>>()?;
            weight_terms.push(terms);
        }
        plans.push(Some(LayerQuantPlan {
            partitioning: p.partitioning,
            weight_terms,
            weight_mse: p.weight_mse,
            weight_mse_single: p.weight_mse_single,
            is_key_layer: p.is_key_layer,
            activation: p.activation,
        }));
    }
    let q = QuantizedModel::from_parts(model, plans, quant.provenance).map_err(|e| rd.invalid("quantization", e))?;
    Ok(Container::Quantized(q))
}

pub fn load(path: &Path) -> CliResult<Container> {
    let bytes = read_file(path)?;
    decode(&bytes).map_err(|e| CliError::format(path, e))
}

pub fn load_model(path: &Path) -> CliResult<NetworkModel> {
    Ok(match load(path)? {
        Container::Model(m) => m,
        Container::Quantized(q) => q.base().clone(),
    })
}

pub fn load_quantized(path: &Path) -> CliResult<QuantizedModel> {
    match load(path)? {
        Container::Quantized(q) => Ok(q),
        Container::Model(_) => Err(CliError::Invalid(format!(
            "{}: container holds no quantization plans",
            path.display()
        ))),
    }
}

pub fn save(path: &Path, c: &Container) -> CliResult<()> {
    write_atomic(path, &encode(c))
}
