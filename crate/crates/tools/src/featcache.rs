//! Binary MFCC cache: magic, version, frame count, dimension, then the
//! row-major values as little-endian `f32`.

use std::path::Path;

use asr_core::features::{FeatureMatrix, FEATURE_DIM};

use crate::error::{Result, ToolError};

pub const MAGIC: &[u8; 8] = b"MFCC39\0\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 3 * 4;

pub fn encode(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(f.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    for &v in f.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<FeatureMatrix, String> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err("not an MFCC39 feature cache".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let (version, t, d) = (word(0), word(1) as usize, word(2) as usize);
    if version != VERSION {
        return Err(format!("unsupported cache version {version}"));
    }
    if d != FEATURE_DIM {
        return Err(format!("dimension {d}, expected {FEATURE_DIM}"));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * t * d {
        return Err(format!("{} payload bytes for {t}×{d} values", body.len()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMatrix::from_frames(data).map_err(|e| e.to_string())
}

pub fn write(path: &Path, f: &FeatureMatrix) -> Result<()> {
    std::fs::write(path, encode(f)).map_err(|e| ToolError::io(path, e))
}

pub fn read(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| ToolError::io(path, e))?;
    decode(&bytes).map_err(|m| ToolError::format(path, m))
}
