//! MEMB embedding-sequence file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   "MEMB"
//! version  u16       1
//! modality u8        0 = video, 1 = audio, 2 = text
//! dtype    u8        0 = float32 little-endian payload
//! L        u32       number of rows (≥ 1)
//! d        u32       row width (≥ 1)
//! payload  L·d × f32 row-major
//! crc      u32       CRC-32 of every preceding byte
//! ```
//!
//! Values are stored as float32 (halving storage) and widened to float64
//! on load, so a file → sequence → file round trip is byte-identical.

use std::fs;
use std::path::Path;

use super::{DataError, EmbeddingSequence, Modality};
use crate::crc32::crc32;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MEMB";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes a sequence to MEMB bytes.
pub fn encode_embedding(seq: &EmbeddingSequence) -> Result<Vec<u8>, DataError> {
    if !seq.rows.is_finite() {
        return Err(DataError::NonFiniteSequence);
    }
    let (l, d) = (seq.len() as u32, seq.dim() as u32);
    let mut out = Vec::with_capacity(16 + seq.rows.numel() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(seq.modality.tag());
    out.push(DTYPE_F32);
    out.extend_from_slice(&l.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for &v in seq.rows.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn write_embedding(seq: &EmbeddingSequence, path: &Path) -> Result<(), DataError> {
    let bytes = encode_embedding(seq)?;
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses MEMB bytes, validating magic, version, dtype, dimensions,
/// payload length, finiteness, and the trailing checksum.
pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<EmbeddingSequence, DataError> {
    let p = || path.to_path_buf();
    if bytes.len() < 16 + 4 {
        return Err(DataError::Truncated {
            path: p(),
            expected: 20,
            got: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(DataError::BadMagic {
            path: p(),
            expected: "MEMB",
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DataError::BadVersion {
            path: p(),
            got: version,
        });
    }
    let modality = Modality::from_tag(bytes[6]).ok_or(DataError::BadModalityTag {
        path: p(),
        got: bytes[6],
    })?;
    if bytes[7] != DTYPE_F32 {
        return Err(DataError::BadDtype {
            path: p(),
            got: bytes[7],
        });
    }
    let l = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if l == 0 || d == 0 {
        return Err(DataError::BadDims {
            path: p(),
            rows: l,
            cols: d,
        });
    }
    let payload_len = (l as usize) * (d as usize) * 4;
    let expected_total = 16 + payload_len + 4;
    if bytes.len() != expected_total {
        return Err(DataError::Truncated {
            path: p(),
            expected: expected_total,
            got: bytes.len(),
        });
    }
    let stored = u32::from_le_bytes(bytes[expected_total - 4..].try_into().unwrap());
    let computed = crc32(&bytes[..expected_total - 4]);
    if stored != computed {
        return Err(DataError::Checksum {
            path: p(),
            stored,
            computed,
        });
    }
    let mut data = Vec::with_capacity((l * d) as usize);
    for chunk in bytes[16..16 + payload_len].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DataError::NonFinitePayload { path: p() });
        }
        data.push(v as f64);
    }
    let rows = Tensor::from_vec(vec![l as usize, d as usize], data).expect("dims validated");
    Ok(EmbeddingSequence { modality, rows })
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingSequence, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_embedding(&bytes, path)
}
