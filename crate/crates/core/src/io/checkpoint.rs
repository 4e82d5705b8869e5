//! `.smck` layout, all integers and floats little-endian:
//!
//! ```text
//! "SMCK" u16 version
//! u32 L, u32 d_h, u32 d_m
//! per layer: u32 n, u32 n_stored, u32 k, n × u32 remap
//! per layer: W_R (d_h × n), then per stored expert W_gate, W_up, W_down
//!            as row-major f32
//! ```

use std::path::Path;

use super::{put_f32s, to_u32, FormatError, Reader};
use crate::error::{Error, Result};
use crate::moe::{ExpertWeights, MoeLayer, MoeModel};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

struct LayerHeader {
    n: usize,
    n_stored: usize,
    k: usize,
    remap: Vec<usize>,
}

pub fn encode_checkpoint(model: &MoeModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [model.num_layers(), model.d_h(), model.d_m()] {
        out.extend_from_slice(&to_u32(v, "dimension")?.to_le_bytes());
    }
    for layer in model.layers() {
        for v in [layer.n_slots(), layer.n_stored(), layer.k()] {
            out.extend_from_slice(&to_u32(v, "layer size")?.to_le_bytes());
        }
        for &r in layer.remap() {
            out.extend_from_slice(&to_u32(r, "remap entry")?.to_le_bytes());
        }
    }
    for layer in model.layers() {
        put_f32s(&mut out, layer.router().as_slice());
        for e in layer.experts() {
            put_f32s(&mut out, e.w_gate.as_slice());
            put_f32s(&mut out, e.w_up.as_slice());
            put_f32s(&mut out, e.w_down.as_slice());
        }
    }
    Ok(out)
}

fn payload_bytes(headers: &[LayerHeader], d_h: u64, d_m: u64) -> Option<u64> {
    let expert = d_h.checked_mul(d_m)?.checked_mul(3)?;
    headers.iter().try_fold(0u64, |acc, h| {
        let floats = d_h
            .checked_mul(h.n as u64)?
            .checked_add(expert.checked_mul(h.n_stored as u64)?)?;
        acc.checked_add(floats.checked_mul(4)?)
    })
}

/// Parses a checkpoint, validating magic, version and the header's size
/// arithmetic against the byte length before any tensor is allocated.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<MoeModel> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let layers = r.u32()? as usize;
    let d_h = r.u32()? as usize;
    let d_m = r.u32()? as usize;
    // each layer header is at least 12 bytes
    r.require((layers as u64).saturating_mul(12))?;
    let mut headers = Vec::with_capacity(layers);
    for _ in 0..layers {
        let n = r.u32()? as usize;
        let n_stored = r.u32()? as usize;
        let k = r.u32()? as usize;
        r.require((n as u64) * 4)?;
        let remap = (0..n)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<std::result::Result<_, _>>()?;
        headers.push(LayerHeader { n, n_stored, k, remap });
    }
    let expected = payload_bytes(&headers, d_h as u64, d_m as u64)
        .ok_or_else(|| FormatError::InvalidHeader("tensor sizes overflow".into()))?;
    let actual = r.remaining();
    if expected > actual {
        return Err(FormatError::Truncated {
            needed: expected,
            available: actual,
        }
        .into());
    }
    if expected < actual {
        return Err(FormatError::SizeMismatch { expected, actual }.into());
    }

    let mut out = Vec::with_capacity(layers);
    for h in headers {
        let router = Matrix::from_vec(d_h, h.n, r.f32s(d_h * h.n)?)?;
        let experts = (0..h.n_stored)
            .map(|_| -> Result<ExpertWeights> {
                let w_gate = Matrix::from_vec(d_h, d_m, r.f32s(d_h * d_m)?)?;
                let w_up = Matrix::from_vec(d_h, d_m, r.f32s(d_h * d_m)?)?;
                let w_down = Matrix::from_vec(d_m, d_h, r.f32s(d_m * d_h)?)?;
                ExpertWeights::new(w_gate, w_up, w_down)
            })
            .collect::<Result<Vec<_>>>()?;
        let layer = MoeLayer::new(router, experts, h.remap, h.k)
            .map_err(|e| Error::from(FormatError::InvalidHeader(e.to_string())))?;
        out.push(layer);
    }
    MoeModel::new(d_h, d_m, out)
}

pub fn save_checkpoint(model: &MoeModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MoeModel> {
    decode_checkpoint(&std::fs::read(path)?)
}
