//! The mel / template binary layout.
//!
//! Little-endian: 4-byte magic (`SBML` for mel files, `SBTP` for templates),
//! version u32, T u32, B u32, frame_shift f64, then T*B row-major f64 values.
//! Readers bounds-check the declared sizes against the input length before
//! allocating.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::mat::Mat;

pub const MEL_MAGIC: [u8; 4] = *b"SBML";
pub const TEMPLATE_MAGIC: [u8; 4] = *b"SBTP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MelFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected {expected:?})")]
    BadMagic { expected: String },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("declared {t}x{b} frames but payload holds {actual} bytes")]
    PayloadMismatch { t: u32, b: u32, actual: usize },
    #[error("declared size {t}x{b} overflows")]
    SizeOverflow { t: u32, b: u32 },
    #[error("zero-sized matrix")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

pub fn encode(magic: [u8; 4], mat: &Mat, frame_shift_ms: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + mat.data().len() * 8);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(mat.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(mat.cols() as u32).to_le_bytes());
    out.extend_from_slice(&frame_shift_ms.to_le_bytes());
    for v in mat.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<(Mat, f64), MelFileError> {
    if bytes.len() < 24 {
        if bytes.len() >= 4 && bytes[0..4] != magic {
            return Err(MelFileError::BadMagic { expected: String::from_utf8_lossy(&magic).into_owned() });
        }
        return Err(MelFileError::TruncatedHeader);
    }
    if bytes[0..4] != magic {
        return Err(MelFileError::BadMagic { expected: String::from_utf8_lossy(&magic).into_owned() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(MelFileError::BadVersion(version));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let b = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let shift = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if t == 0 || b == 0 {
        return Err(MelFileError::Empty);
    }
    let numel = (t as u64).checked_mul(b as u64).ok_or(MelFileError::SizeOverflow { t, b })?;
    let expected = numel.checked_mul(8).ok_or(MelFileError::SizeOverflow { t, b })?;
    let payload = &bytes[24..];
    if payload.len() as u64 != expected {
        return Err(MelFileError::PayloadMismatch { t, b, actual: payload.len() });
    }
    let mut data = Vec::with_capacity(numel as usize);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(MelFileError::NonFinite(i));
        }
        data.push(v);
    }
    Ok((Mat::from_vec(t as usize, b as usize, data), shift))
}

pub fn write(path: &Path, magic: [u8; 4], mat: &Mat, frame_shift_ms: f64) -> Result<(), MelFileError> {
    fs::write(path, encode(magic, mat, frame_shift_ms))?;
    Ok(())
}

pub fn read(path: &Path, magic: [u8; 4]) -> Result<(Mat, f64), MelFileError> {
    let bytes = fs::read(path)?;
    decode(&bytes, magic)
}
