//! File formats: `.smck` checkpoints, `.f32mat` batches, activation-cache
//! sidecars, JSON reports, and the expert-parameter calculator.

mod activations;
mod batch;
mod checkpoint;
mod params;
mod report;

use thiserror::Error;

pub use activations::{
    attach_activations, decode_activations, encode_activations, load_activations, save_activations, ACTIVATION_MAGIC,
    ACTIVATION_VERSION,
};
pub use batch::{decode_batch, encode_batch, load_batch, save_batch, BATCH_MAGIC};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use params::{ArchDims, ParamReport};
pub use report::{ReportDoc, REPORT_SCHEMA_VERSION};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("payload size mismatch: header implies {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad_magic",
            FormatError::UnsupportedVersion { .. } => "version_mismatch",
            FormatError::Truncated { .. } => "truncated",
            FormatError::SizeMismatch { .. } => "size_mismatch",
            FormatError::InvalidHeader(_) => "invalid_header",
        }
    }
}

/// Little-endian cursor that checks lengths before every read.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> u64 {
        (self.bytes.len() - self.pos) as u64
    }

    pub(crate) fn require(&self, needed: u64) -> Result<(), FormatError> {
        if needed > self.remaining() {
            return Err(FormatError::Truncated {
                needed,
                available: self.remaining(),
            });
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8], FormatError> {
        self.require(len as u64)?;
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4).map_err(|_| FormatError::BadMagic {
            expected,
            found: self.bytes.to_vec(),
        })?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, count: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| FormatError::InvalidHeader("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::InvalidHeader(format!("{what} {v} does not fit in u32")))
}
