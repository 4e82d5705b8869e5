//! `.f32mat` layout: `"F32M"`, u32 T, u32 d_h, then T × d_h little-endian f32.

use std::path::Path;

use super::{put_f32s, to_u32, FormatError, Reader};
use crate::error::Result;
use crate::moe::TokenBatch;
use crate::tensor::Matrix;

pub const BATCH_MAGIC: [u8; 4] = *b"F32M";

pub fn encode_batch(batch: &TokenBatch) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + batch.len() * batch.d_h() * 4);
    out.extend_from_slice(&BATCH_MAGIC);
    out.extend_from_slice(&to_u32(batch.len(), "token count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(batch.d_h(), "width")?.to_le_bytes());
    put_f32s(&mut out, batch.matrix().as_slice());
    Ok(out)
}

pub fn decode_batch(bytes: &[u8]) -> Result<TokenBatch> {
    let mut r = Reader::new(bytes);
    r.magic(BATCH_MAGIC)?;
    let t = r.u32()? as usize;
    let d_h = r.u32()? as usize;
    let expected = (t as u64) * (d_h as u64) * 4;
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
    TokenBatch::new(Matrix::from_vec(t, d_h, r.f32s(t * d_h)?)?)
}

pub fn save_batch(batch: &TokenBatch, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_batch(batch)?)?;
    Ok(())
}

pub fn load_batch(path: impl AsRef<Path>) -> Result<TokenBatch> {
    decode_batch(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::synth::{gen_batch, PlantedSpec};

    #[test]
    fn round_trip_and_errors() {
        let batch = gen_batch(&PlantedSpec::default(), 7).unwrap();
        let bytes = encode_batch(&batch).unwrap();
        assert_eq!(&bytes[..4], b"F32M");
        assert_eq!(decode_batch(&bytes).unwrap(), batch);
        assert!(matches!(
            decode_batch(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(
            decode_batch(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
    }
}
