use alloc::format;
use alloc::vec::Vec;

use super::Waveform;
use crate::error::{Error, Result};

/// A detected utterance, in seconds from the start of the recording.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl SegmentSpan {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VadConfig {
    pub min_s: f64,
    pub max_s: f64,
    /// Gate level as a fraction of the loudest frame's energy.
    pub energy_threshold: f64,
    pub frame_s: f64,
    pub hop_s: f64,
    /// Inactive gaps up to this long are bridged.
    pub hangover_s: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            min_s: 2.0,
            max_s: 10.0,
            energy_threshold: 0.02,
            frame_s: 0.025,
            hop_s: 0.010,
            hangover_s: 0.3,
        }
    }
}

/// Sum of squared samples per frame. Frames that would run past the end of
/// the signal are not produced.
pub fn frame_energies(samples: &[f64], frame_len: usize, hop: usize) -> Vec<f64> {
    if frame_len == 0 || hop == 0 || samples.len() < frame_len {
        return Vec::new();
    }
    let count = 1 + (samples.len() - frame_len) / hop;
    (0..count)
        .map(|i| samples[i * hop..i * hop + frame_len].iter().map(|v| v * v).sum())
        .collect()
}

/// Energy-gated utterance segmentation.
///
/// Frame `i` owns the hop-long cell centred on its analysis window, so
/// consecutive frames tile time without gaps. Active runs closer than the
/// hangover are merged; runs longer than `max_s` are cut at their
/// lowest-energy interior frame (latest on ties) among cut points leaving
/// both sides at least `min_s`; runs shorter than `min_s` are dropped.
pub fn vad_segment(w: &Waveform, cfg: &VadConfig) -> Result<Vec<SegmentSpan>> {
    if !(cfg.min_s >= 0.0 && cfg.min_s < cfg.max_s) {
        return Err(Error::Config(format!(
            "need 0 <= min_s < max_s, got {} and {}",
            cfg.min_s, cfg.max_s
        )));
    }
    if !(cfg.energy_threshold > 0.0 && cfg.energy_threshold < 1.0) {
        return Err(Error::Config(format!(
            "energy threshold {} outside (0, 1)",
            cfg.energy_threshold
        )));
    }
    let sr = w.sample_rate_hz() as f64;
    let frame_len = libm::round(cfg.frame_s * sr) as usize;
    let hop = libm::round(cfg.hop_s * sr) as usize;
    if frame_len == 0 || hop == 0 || hop > frame_len {
        return Err(Error::Config("frame and hop must satisfy 0 < hop <= frame".into()));
    }
    let energies = frame_energies(w.samples(), frame_len, hop);
    let peak = energies.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(Vec::new());
    }
    let gate = cfg.energy_threshold * peak;
    let hangover = libm::round(cfg.hangover_s * sr / hop as f64) as usize;

    // active runs as inclusive frame ranges, with short gaps bridged
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, &e) in energies.iter().enumerate() {
        if e <= gate {
            continue;
        }
        match runs.last_mut() {
            Some((_, end)) if i - *end - 1 <= hangover => *end = i,
            _ => runs.push((i, i)),
        }
    }

    let frames_for = |seconds: f64| libm::floor(seconds * sr / hop as f64 + 1e-9) as usize;
    let min_frames = libm::ceil(cfg.min_s * sr / hop as f64 - 1e-9) as usize;
    let max_frames = frames_for(cfg.max_s).max(1);

    let mut pieces: Vec<(usize, usize)> = Vec::new();
    for (mut a, b) in runs {
        while b + 1 - a > max_frames {
            // cut at k: left [a, k-1], right [k, b]
            let lo = a + min_frames.max(1);
            let hi = (a + max_frames).min((b + 1).saturating_sub(min_frames));
            let cut = if lo <= hi {
                (lo..=hi)
                    .min_by(|&x, &y| {
                        energies[x]
                            .partial_cmp(&energies[y])
                            .unwrap_or(core::cmp::Ordering::Equal)
                            .then(y.cmp(&x))
                    })
                    .unwrap_or(a + max_frames)
            } else {
                a + max_frames
            };
            pieces.push((a, cut - 1));
            a = cut;
        }
        pieces.push((a, b));
    }

    let offset = (frame_len - hop) as f64 / 2.0;
    Ok(pieces
        .into_iter()
        .filter(|&(a, b)| b + 1 - a >= min_frames)
        .map(|(a, b)| SegmentSpan {
            start_s: (a as f64 * hop as f64 + offset) / sr,
            end_s: ((b + 1) as f64 * hop as f64 + offset) / sr,
        })
        .collect())
}
