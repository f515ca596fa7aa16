//! `QCAL1` sample files, used for calibration sets and evaluation data.
//!
//! ```text
//! "QCAL1" | u32 d | u32 rank | rank × u32 dims | d × prod(dims) × f32
//! ```

use std::path::Path;

use qnet_core::Tensor;

use crate::error::{CliError, CliResult, FormatError};
use crate::io::{read_file, write_atomic};

pub const MAGIC: &[u8; 5] = b"QCAL1";

/// Samples of one shared shape. `samples` may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub shape: Vec<usize>,
    pub samples: Vec<Tensor>,
}

impl SampleSet {
    /// Fails when the samples disagree on shape or there are none to infer
    /// it from.
    pub fn from_samples(samples: Vec<Tensor>) -> CliResult<Self> {
        let shape = samples
            .first()
            .map(|s| s.shape().to_vec())
            .ok_or_else(|| CliError::Invalid("empty calibration set".into()))?;
        if let Some(bad) = samples.iter().find(|s| s.shape() != shape.as_slice()) {
            return Err(CliError::Invalid(format!(
                "sample shape {:?} differs from {shape:?}",
                bad.shape()
            )));
        }
        Ok(Self { shape, samples })
    }
}

pub fn encode(set: &SampleSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.shape.len() as u32).to_le_bytes());
    for &d in &set.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in &set.samples {
        for v in s.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, FormatError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| FormatError::new(at as u64, format!("truncated {what}")))
}

pub fn decode(bytes: &[u8]) -> Result<SampleSet, FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::new(0, "missing QCAL1 magic"));
    }
    let d = read_u32(bytes, 5, "sample count")? as usize;
    let rank = read_u32(bytes, 9, "rank")? as usize;
    let mut at = 13;
    let mut shape = Vec::with_capacity(rank.min(16));
    for k in 0..rank {
        let dim = read_u32(bytes, at, &format!("dimension {k}"))? as usize;
        if dim == 0 {
            return Err(FormatError::new(at as u64, "zero dimension"));
        }
        shape.push(dim);
        at += 4;
    }
    if rank == 0 {
        return Err(FormatError::new(9, "rank must be positive"));
    }
    let per = shape.iter().product::<usize>();
    let need = d.checked_mul(per).and_then(|n| n.checked_mul(4));
    match need {
        Some(n) if at + n == bytes.len() => {}
        Some(n) if at + n > bytes.len() => {
            return Err(FormatError::new(
                bytes.len() as u64,
                format!("truncated: {d} samples need {n} bytes"),
            ))
        }
        Some(n) => return Err(FormatError::new((at + n) as u64, "trailing bytes after the samples")),
        None => return Err(FormatError::new(5, "sample volume overflows")),
    }
    let mut samples = Vec::with_capacity(d);
    for s in 0..d {
        let start = at + s * per * 4;
        let data: Vec<f32> = bytes[start..start + per * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::new((start + 4 * i) as u64, "non-finite value"));
        }
        samples.push(Tensor::new(shape.clone(), data).expect("volume checked"));
    }
    Ok(SampleSet { shape, samples })
}

pub fn load(path: &Path) -> CliResult<SampleSet> {
    let bytes = read_file(path)?;
    decode(&bytes).map_err(|e| CliError::format(path, e))
}

pub fn save(path: &Path, set: &SampleSet) -> CliResult<()> {
    write_atomic(path, &encode(set))
}
