//! `chain.bin` layout, all integers and floats little-endian:
//!
//! ```text
//! b"HLSIRMCH"                magic
//! u32                        format version (1)
//! u64 + bytes                JSON header (ChainHeader)
//! f64 × len × num_samples    flattened samples
//! f64 × cells                fitted probabilities
//! ```
//!
//! A sample flattens as α_(k), σ²_(k), z_(k), α_i(k), z_i(k), β_j, w_j, Ψ_z,
//! Ψ_w and, when stored, ε, each in group, row, item, column order.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{AcceptanceLog, ChainConfig, PosteriorChain, TraceEntry};
use crate::error::{Error, Result};
use crate::model::ModelState;

const MAGIC: &[u8; 8] = b"HLSIRMCH";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ChainHeader {
    version: String,
    config: ChainConfig,
    data_fingerprint: String,
    group_sizes: Vec<usize>,
    num_items: usize,
    dim: usize,
    num_samples: usize,
    residuals_stored: bool,
    acceptance: AcceptanceLog,
    adaptation_trace: Vec<TraceEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// A chain read back from disk with any caller metadata stored alongside it.
#[derive(Clone, Debug)]
pub struct ChainFile {
    pub chain: PosteriorChain,
    pub metadata: serde_json::Value,
}

fn flatten(s: &ModelState, out: &mut Vec<f64>) {
    out.extend(&s.group_intercepts);
    out.extend(&s.group_variances);
    out.extend(s.group_positions.iter().flatten());
    out.extend(s.individual_intercepts.iter().flatten());
    out.extend(s.individual_positions.iter().flatten().flatten());
    out.extend(&s.item_intercepts);
    out.extend(s.item_positions.iter().flatten());
    out.extend(s.psi_z.transpose().iter());
    out.extend(s.psi_w.transpose().iter());
    out.extend(s.residuals.iter().flatten().flatten());
}

fn unflatten(values: &[f64], sizes: &[usize], p: usize, d: usize, residuals: bool) -> ModelState {
    let mut it = values.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    let k = sizes.len();
    let rows = |v: Vec<f64>, width: usize| -> Vec<Vec<f64>> { v.chunks(width).map(<[f64]>::to_vec).collect() };
    let group_intercepts = take(k);
    let group_variances = take(k);
    let group_positions = rows(take(k * d), d);
    let individual_intercepts = sizes.iter().map(|&n| take(n)).collect();
    let individual_positions = sizes.iter().map(|&n| rows(take(n * d), d)).collect();
    let item_intercepts = take(p);
    let item_positions = rows(take(p * d), d);
    let psi_z = DMatrix::from_row_slice(d, d, &take(d * d));
    let psi_w = DMatrix::from_row_slice(d, d, &take(d * d));
    let residuals = if residuals {
        sizes.iter().map(|&n| rows(take(n * p), p)).collect()
    } else {
        Vec::new()
    };
    ModelState {
        group_intercepts,
        group_variances,
        group_positions,
        individual_intercepts,
        individual_positions,
        item_intercepts,
        item_positions,
        psi_z,
        psi_w,
        residuals,
    }
}

fn sample_len(sizes: &[usize], p: usize, d: usize, residuals: bool) -> usize {
    let k = sizes.len();
    let n: usize = sizes.iter().sum();
    2 * k + k * d + n + n * d + p + p * d + 2 * d * d + if residuals { n * p } else { 0 }
}

pub fn write_chain<W: Write>(chain: &PosteriorChain, metadata: serde_json::Value, mut out: W) -> Result<()> {
    let first = chain
        .samples
        .first()
        .ok_or_else(|| Error::Argument("cannot write an empty chain".into()))?;
    let sizes = first.group_sizes();
    let (p, d) = (first.num_items(), first.dim());
    let residuals = first.has_residuals();
    let header = ChainHeader {
        version: crate::VERSION.to_string(),
        config: chain.config.clone(),
        data_fingerprint: chain.data_fingerprint.clone(),
        group_sizes: sizes.clone(),
        num_items: p,
        dim: d,
        num_samples: chain.samples.len(),
        residuals_stored: residuals,
        acceptance: chain.acceptance.clone(),
        adaptation_trace: chain.adaptation_trace.clone(),
        metadata,
    };
    let header = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(sample_len(&sizes, p, d, residuals));
    for s in &chain.samples {
        if s.group_sizes() != sizes || s.has_residuals() != residuals {
            return Err(Error::Shape("chain samples disagree in shape".into()));
        }
        buf.clear();
        flatten(s, &mut buf);
        write_f64s(&mut out, &buf)?;
    }
    let fitted: Vec<f64> = chain.fitted_probabilities.iter().flatten().flatten().copied().collect();
    write_f64s(&mut out, &fitted)?;
    out.flush()?;
    Ok(())
}

fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated chain file: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_chain<R: Read>(mut input: R) -> Result<ChainFile> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a chain file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != FORMAT_VERSION {
        return Err(Error::Format("unsupported chain file version".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header: ChainHeader = serde_json::from_slice(&header)?;
    let (sizes, p, d) = (&header.group_sizes, header.num_items, header.dim);
    let per = sample_len(sizes, p, d, header.residuals_stored);
    let mut samples = Vec::with_capacity(header.num_samples);
    for _ in 0..header.num_samples {
        let values = read_f64s(&mut input, per)?;
        samples.push(unflatten(&values, sizes, p, d, header.residuals_stored));
    }
    let cells: usize = sizes.iter().sum::<usize>() * p;
    let fitted = read_f64s(&mut input, cells)?;
    let mut it = fitted.chunks(p.max(1));
    let fitted_probabilities = sizes
        .iter()
        .map(|&n| (0..n).map(|_| it.next().map(<[f64]>::to_vec).unwrap_or_default()).collect())
        .collect();
    Ok(ChainFile {
        chain: PosteriorChain {
            config: header.config,
            data_fingerprint: header.data_fingerprint,
            samples,
            acceptance: header.acceptance,
            adaptation_trace: header.adaptation_trace,
            fitted_probabilities,
        },
        metadata: header.metadata,
    })
}
