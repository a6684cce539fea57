//! JSON-lines manifests and vocabulary files.

use std::io::Write;
use std::path::{Path, PathBuf};

use asr_core::corpus::{ManifestEntry, Vocabulary};

use crate::error::{Result, ToolError};

/// A manifest and the directory its relative audio paths resolve against.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, audio: &str) -> PathBuf {
        self.root.join(audio)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| ToolError::format(path, format!("line {}: {err}", i + 1)))?;
        e.validate()
            .map_err(|err| ToolError::format(path, format!("line {}: {err}", i + 1)))?;
        entries.push(e);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { entries, root })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("manifest entry serializes");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| ToolError::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
    Vocabulary::from_lines(&text).map_err(|e| ToolError::format(path, e.to_string()))
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| ToolError::io(path, e))?;
    f.write_all(vocab.to_lines().as_bytes())
        .map_err(|e| ToolError::io(path, e))
}
