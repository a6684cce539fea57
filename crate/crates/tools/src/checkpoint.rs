//! Checkpoint files: magic, version, a length-prefixed JSON header with the
//! model config and parameter layout, then every stored parameter as
//! little-endian `f32` in header order.

use std::path::Path;

use asr_core::grad::Array;
use asr_core::model::{Model, ModelConfig, Section};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToolError};

pub const MAGIC: &[u8; 8] = b"ASRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    /// Network parts whose parameters are stored.
    pub sections: Vec<Section>,
    pub params: Vec<ParamEntry>,
}

/// A decoded checkpoint. Parameters outside `header.sections` hold the
/// seed-0 initialization.
pub struct Checkpoint {
    pub header: Header,
    pub model: Model,
}

impl Checkpoint {
    pub fn has(&self, section: Section) -> bool {
        self.header.sections.contains(&section)
    }
}

pub fn encode(model: &Model, sections: &[Section]) -> Result<Vec<u8>> {
    let stored: Vec<(&str, &Array)> = model
        .named_values()
        .filter(|(n, _)| sections.contains(&Section::of(n)))
        .collect();
    let header = Header {
        config: model.config().clone(),
        sections: sections.to_vec(),
        params: stored
            .iter()
            .map(|(n, v)| ParamEntry {
                name: n.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, v) in stored {
        for &x in v.data() {
            let f = x as f32;
            if !f.is_finite() {
                log::error!("parameter {name} is not finite");
                return Err(asr_core::Error::NonFinite("checkpoint parameter").into());
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not an ASRCKPT checkpoint".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or("truncated header")?;
    let header: Header = serde_json::from_slice(json).map_err(|e| format!("header: {e}"))?;
    let mut model = Model::new(header.config.clone(), 0).map_err(|e| e.to_string())?;
    let mut body = &bytes[16 + len..];
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        if body.len() < 4 * n {
            return Err(format!("truncated values for {}", p.name));
        }
        let data = body[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        body = &body[4 * n..];
        values.push((p.name.as_str(), Array::new(p.shape.clone(), data).map_err(|e| e.to_string())?));
    }
    if !body.is_empty() {
        return Err(format!("{} trailing bytes", body.len()));
    }
    model
        .load_values(values.iter().map(|(n, v)| (*n, v)), &header.sections)
        .map_err(|e| e.to_string())?;
    Ok(Checkpoint { header, model })
}

pub fn save(path: &Path, model: &Model, sections: &[Section]) -> Result<()> {
    let bytes = encode(model, sections)?;
    std::fs::write(path, bytes).map_err(|e| ToolError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| ToolError::io(path, e))?;
    decode(&bytes).map_err(|m| ToolError::format(path, m))
}
