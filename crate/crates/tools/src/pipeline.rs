//! From manifest entries to in-memory training utterances.

use std::path::{Path, PathBuf};

use asr_core::audio::{speed_perturb, vad_segment, VadConfig, Waveform};
use asr_core::corpus::{encode_transcript, synth_corpus, ManifestEntry, Origin, SynthSpec, Vocabulary};
use asr_core::features::{mfcc, FeatureMatrix, MfccConfig};
use asr_core::train::Utterance;

use crate::error::{Result, ToolError};
use crate::manifest::Manifest;
use crate::wav::{read_wav, write_wav};

/// Audio of one entry. Augmented entries are materialized from their source
/// recording by speed perturbation.
pub fn load_audio(root: &Path, entry: &ManifestEntry) -> Result<Waveform> {
    let path = root.join(entry.audio_source());
    let w = read_wav(&path)?;
    match (entry.origin, entry.factor) {
        (Some(Origin::Augmented), Some(f)) => Ok(speed_perturb(&w, f)?),
        (Some(Origin::Augmented), None) => Err(ToolError::format(
            path,
            format!("augmented entry {:?} has no speed factor", entry.audio),
        )),
        _ => Ok(w),
    }
}

/// Per-utterance mean and variance normalized MFCCs.
pub fn features_of(w: &Waveform) -> Result<FeatureMatrix> {
    Ok(mfcc(w, &MfccConfig::default())?.normalized())
}

/// Loads every entry. With a vocabulary, transcripts are required and
/// encoded as labels.
pub fn load_utterances(
    root: &Path,
    entries: &[ManifestEntry],
    vocab: Option<&Vocabulary>,
) -> Result<Vec<Utterance>> {
    entries
        .iter()
        .map(|e| {
            let label = match vocab {
                Some(v) => {
                    let text = e.text.as_deref().ok_or_else(|| {
                        ToolError::format(root.join(&e.audio), "labelled manifest entry has no text")
                    })?;
                    Some(encode_transcript(text, v)?)
                }
                None => None,
            };
            Ok(Utterance {
                id: e.audio.clone(),
                features: features_of(&load_audio(root, e)?)?,
                duration_s: e.duration_s,
                label,
            })
        })
        .collect()
}

pub fn load_manifest_utterances(m: &Manifest, vocab: Option<&Vocabulary>) -> Result<Vec<Utterance>> {
    load_utterances(&m.root, &m.entries, vocab)
}

/// `path` relative to `base` when it lies beneath it, absolute otherwise.
pub fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(p)
}

/// Rewrites the audio paths of `m` so they resolve against `new_root`.
pub fn rebase(m: &Manifest, new_root: &Path) -> Vec<ManifestEntry> {
    let fix = |a: &str| relative_to(&m.resolve(a), new_root).to_string_lossy().into_owned();
    m.entries
        .iter()
        .map(|e| ManifestEntry {
            audio: fix(&e.audio),
            source: e.source.as_deref().map(fix),
            ..e.clone()
        })
        .collect()
}

/// Cuts a recording into utterances, writing `seg_NNNN.wav` files into
/// `dir` and returning their (untranscribed) entries.
pub fn segment_to_dir(w: &Waveform, cfg: &VadConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let spans = vad_segment(w, cfg)?;
    let mut entries = Vec::with_capacity(spans.len());
    for (i, s) in spans.iter().enumerate() {
        let piece = w.slice_seconds(s.start_s, s.end_s)?;
        let name = format!("seg_{i:04}.wav");
        write_wav(&dir.join(&name), &piece)?;
        entries.push(ManifestEntry::new(name, piece.duration_s(), None));
    }
    Ok(entries)
}

/// Writes a synthetic tone corpus as `utt_NNNN.wav` files into `dir`.
pub fn synth_to_dir(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let corpus = synth_corpus(spec, seed)?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, u) in corpus.iter().enumerate() {
        let name = format!("utt_{i:04}.wav");
        write_wav(&dir.join(&name), &u.waveform)?;
        entries.push(ManifestEntry::new(name, u.waveform.duration_s(), Some(u.text.clone())));
    }
    Ok(entries)
}
