//! Minimal RIFF/WAVE reader and writer: 16-bit PCM, mono. Enough to feed
//! recorded or synthetic audio into F0 estimation; anything fancier is
//! rejected rather than guessed at.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::Waveform;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("truncated chunk `{0}`")]
    Truncated(&'static str),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("missing fmt chunk")]
    MissingFmt,
    #[error("missing data chunk")]
    MissingData,
}

pub fn decode(bytes: &[u8]) -> Result<Waveform, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWave);
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if size > bytes.len() - pos {
            return Err(WavError::Truncated("chunk body"));
        }
        let body = &bytes[pos..pos + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(WavError::Truncated("fmt"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos += size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or(WavError::MissingFmt)?;
    if format != 1 {
        return Err(WavError::Unsupported("non-PCM format"));
    }
    if channels != 1 {
        return Err(WavError::Unsupported("only mono is supported"));
    }
    if bits != 16 {
        return Err(WavError::Unsupported("only 16-bit samples are supported"));
    }
    if rate == 0 {
        return Err(WavError::Unsupported("zero sample rate"));
    }
    let body = data.ok_or(WavError::MissingData)?;
    let samples = body
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform { samples, sample_rate: rate })
}

pub fn encode(w: &Waveform) -> Vec<u8> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read(path: &Path) -> Result<Waveform, WavError> {
    decode(&fs::read(path)?)
}

pub fn write(path: &Path, w: &Waveform) -> Result<(), WavError> {
    fs::write(path, encode(w))?;
    Ok(())
}
