//! Activation-cache sidecar: `"MKAC"`, u16 version, u32 L, u32 n, u32 T,
//! u32 d_m, then for each layer and expert a T × d_m little-endian f32 block.

use std::path::Path;

use super::{put_f32s, to_u32, FormatError, Reader};
use crate::calibration::CalibrationStats;
use crate::error::{check_dim, Error, Result};
use crate::tensor::Matrix;

pub const ACTIVATION_MAGIC: [u8; 4] = *b"MKAC";
pub const ACTIVATION_VERSION: u16 = 1;

pub fn encode_activations(stats: &CalibrationStats) -> Result<Vec<u8>> {
    let mut caches = Vec::with_capacity(stats.layers.len());
    for (l, ls) in stats.layers.iter().enumerate() {
        caches.push(
            ls.activations
                .as_ref()
                .ok_or(Error::MissingActivationCache { layer: l })?,
        );
    }
    let n = stats.layers.first().map_or(0, |ls| ls.n_experts());
    let d_m = caches.first().and_then(|c| c.first()).map_or(0, Matrix::cols);
    let mut out = Vec::new();
    out.extend_from_slice(&ACTIVATION_MAGIC);
    out.extend_from_slice(&ACTIVATION_VERSION.to_le_bytes());
    for v in [stats.layers.len(), n, stats.token_count, d_m] {
        out.extend_from_slice(&to_u32(v, "activation header field")?.to_le_bytes());
    }
    for cache in caches {
        check_dim("cached experts", n, cache.len())?;
        for m in cache {
            m.ensure_shape("activation cache", stats.token_count, d_m)?;
            put_f32s(&mut out, m.as_slice());
        }
    }
    Ok(out)
}

pub fn decode_activations(bytes: &[u8]) -> Result<Vec<Vec<Matrix>>> {
    let mut r = Reader::new(bytes);
    r.magic(ACTIVATION_MAGIC)?;
    let version = r.u16()?;
    if version != ACTIVATION_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: ACTIVATION_VERSION,
        }
        .into());
    }
    let (layers, n, t, d_m) = (r.u32()? as u64, r.u32()? as u64, r.u32()? as u64, r.u32()? as u64);
    let expected = layers * n * t * d_m * 4;
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
    let (n, t, d_m) = (n as usize, t as usize, d_m as usize);
    (0..layers)
        .map(|_| (0..n).map(|_| Matrix::from_vec(t, d_m, r.f32s(t * d_m)?)).collect())
        .collect()
}

/// Attaches a decoded cache to statistics loaded without one.
pub fn attach_activations(stats: &mut CalibrationStats, caches: Vec<Vec<Matrix>>) -> Result<()> {
    check_dim("cached layers", stats.layers.len(), caches.len())?;
    for (ls, cache) in stats.layers.iter_mut().zip(caches) {
        check_dim("cached experts", ls.n_experts(), cache.len())?;
        if let Some(m) = cache.first() {
            check_dim("cached tokens", stats.token_count, m.rows())?;
        }
        ls.activations = Some(cache);
    }
    Ok(())
}

pub fn save_activations(stats: &CalibrationStats, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_activations(stats)?)?;
    Ok(())
}

pub fn load_activations(path: impl AsRef<Path>) -> Result<Vec<Vec<Matrix>>> {
    decode_activations(&std::fs::read(path)?)
}
