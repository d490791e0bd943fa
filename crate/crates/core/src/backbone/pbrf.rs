//! PBRF: little-endian binary container for dense feature tensors.
//!
//! Layout: `b"PBRF"`, `u32` version (1), `u32` rows, `u32` cols, `u32`
//! channels, then `rows * cols * channels` `f32` values, row-major with the
//! channel index innermost. Nothing follows the payload.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"PBRF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// A raw tensor as stored on disk, before per-location normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

pub fn encode(t: &RawTensor) -> Result<Vec<u8>> {
    if t.values.len() != t.rows * t.cols * t.channels {
        return Err(Error::Domain(format!(
            "tensor holds {} values for dims {}x{}x{}",
            t.values.len(),
            t.rows,
            t.cols,
            t.channels
        )));
    }
    if let Some(i) = t.values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i).into());
    }
    let dim = |d: usize| {
        u32::try_from(d).map_err(|_| Error::Domain(format!("dimension {d} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [t.rows, t.cols, t.channels] {
        out.extend_from_slice(&dim(d)?.to_le_bytes());
    }
    for v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<RawTensor, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let (rows, cols, channels) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let count = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| FormatError::Header("dimension product overflows".into()))?;
    let expected = count
        .checked_mul(4)
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| FormatError::Header("payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::Trailing(bytes.len() - expected));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        values.push(v);
    }
    Ok(RawTensor {
        rows,
        cols,
        channels,
        values,
    })
}

pub fn write_file(path: &Path, t: &RawTensor) -> Result<()> {
    let bytes = encode(t)?;
    crate::io::write_atomic(path, |f| f.write_all(&bytes))
}

pub fn read_file(path: &Path) -> Result<RawTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
