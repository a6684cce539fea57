//! Manifests, grapheme vocabulary, augmentation selection, joint-corpus
//! assembly and a synthetic tone corpus.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, MAX_SPEED_FACTOR, MIN_SPEED_FACTOR};
use crate::error::{Error, Result};
use crate::rng::{purpose, tagged};

/// Speed-perturbation factors used for augmentation.
pub const DEFAULT_FACTORS: [f64; 2] = [0.95, 1.02];
/// Fraction of the new corpus that is augmented.
pub const DEFAULT_AUGMENT_FRACTION: f64 = 0.5;
/// Vocabulary file token for the blank.
pub const BLANK_TOKEN: &str = "<blk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Base,
    New,
    Augmented,
}

/// One manifest line. Augmented entries carry their recipe (`source`,
/// `factor`, `seed`) instead of audio of their own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: String,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ManifestEntry {
    pub fn new(audio: impl Into<String>, duration_s: f64, text: Option<String>) -> Self {
        Self {
            audio: audio.into(),
            duration_s,
            text,
            origin: None,
            factor: None,
            source: None,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::Config(format!(
                "{}: duration_s {} must be positive",
                self.audio, self.duration_s
            )));
        }
        if let Some(f) = self.factor {
            check_factor(f)?;
        }
        Ok(())
    }

    /// Path of the audio to read: the recipe source for augmented entries.
    pub fn audio_source(&self) -> &str {
        self.source.as_deref().unwrap_or(&self.audio)
    }
}

fn check_factor(f: f64) -> Result<()> {
    if !(MIN_SPEED_FACTOR..=MAX_SPEED_FACTOR).contains(&f) {
        return Err(Error::FactorOutOfRange(f));
    }
    Ok(())
}

/// Upper-cases Latin letters; every other code point is left alone.
pub fn fold_grapheme(c: char) -> char {
    let latin = c.is_ascii_alphabetic() || (('\u{00C0}'..='\u{024F}').contains(&c) && c.is_alphabetic());
    if latin {
        let mut up = c.to_uppercase();
        if let (Some(u), None) = (up.next(), up.next()) {
            return u;
        }
    }
    c
}

/// Graphemes with the blank reserved at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    graphemes: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from graphemes in the given order (indices 1..).
    pub fn from_graphemes(graphemes: Vec<char>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, &c) in graphemes.iter().enumerate() {
            if c.is_whitespace() {
                return Err(Error::Config(format!("whitespace grapheme U+{:04X}", c as u32)));
            }
            if index.insert(c, i + 1).is_some() {
                return Err(Error::Config(format!("duplicate grapheme {c:?}")));
            }
        }
        Ok(Self { graphemes, index })
    }

    /// Size including the blank.
    pub fn len(&self) -> usize {
        self.graphemes.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.graphemes.is_empty()
    }

    pub fn graphemes(&self) -> &[char] {
        &self.graphemes
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// `None` for the blank or out-of-range indices.
    pub fn grapheme(&self, index: usize) -> Option<char> {
        index.checked_sub(1).and_then(|i| self.graphemes.get(i)).copied()
    }

    /// Text form of a label sequence; blanks and unknown indices are dropped.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&i| self.grapheme(i)).collect()
    }

    /// One token per line, blank first.
    pub fn to_lines(&self) -> String {
        let mut s = String::from(BLANK_TOKEN);
        for c in &self.graphemes {
            s.push('\n');
            s.push(*c);
        }
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(BLANK_TOKEN) {
            return Err(Error::Config(format!("vocabulary must start with {BLANK_TOKEN}")));
        }
        let mut graphemes = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => graphemes.push(c),
                _ => {
                    return Err(Error::Config(format!(
                        "vocabulary line {}: expected one grapheme, got {line:?}",
                        n + 2
                    )))
                }
            }
        }
        Self::from_graphemes(graphemes)
    }
}

/// Union of the folded graphemes of `texts`, sorted by code point.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Vocabulary> {
    let mut set = BTreeSet::new();
    let mut any = false;
    for t in texts {
        any = true;
        set.extend(t.chars().filter(|c| !c.is_whitespace()).map(fold_grapheme));
    }
    if !any {
        return Err(Error::NoLabeledEntries);
    }
    Vocabulary::from_graphemes(set.into_iter().collect())
}

/// Vocabulary over the transcripts of manifest entries.
pub fn build_vocab_from_entries<'a>(
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
) -> Result<Vocabulary> {
    build_vocab(entries.into_iter().filter_map(|e| e.text.as_deref()))
}

/// Label indices of `text`: whitespace dropped, Latin letters folded.
pub fn encode_transcript(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let labels = text
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(fold_grapheme)
        .map(|c| vocab.index_of(c).ok_or(Error::UnknownGrapheme(c, c as u32)))
        .collect::<Result<Vec<_>>>()?;
    if labels.is_empty() {
        return Err(Error::EmptyTranscript);
    }
    Ok(labels)
}

/// Indices (ascending) of a uniformly random subset of size
/// `round(fraction * n)`, a pure function of `(n, fraction, seed)`.
pub fn select_for_augmentation(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction {fraction} outside [0, 1]")));
    }
    let k = (libm::round(fraction * n as f64) as usize).min(n);
    let mut rng = tagged(seed, purpose::SELECT, 0, 0);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Hour accounting of a joint corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoursReport {
    pub base_hours: f64,
    pub new_hours: f64,
    pub selected_hours: f64,
    /// `(factor, hours)` per augmentation factor.
    pub augmented_hours: Vec<(f64, f64)>,
    pub total_hours: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointCorpus {
    pub entries: Vec<ManifestEntry>,
    pub report: HoursReport,
}

/// Name of the augmented copy of `source` at `factor`.
pub fn augmented_name(source: &str, factor: f64) -> String {
    format!("{source}#speed={factor}")
}

/// Base entries, new entries, then every selected new entry once per
/// factor with duration `source / factor`.
pub fn build_joint_corpus(
    base: &[ManifestEntry],
    new: &[ManifestEntry],
    fraction: f64,
    factors: &[f64],
    seed: u64,
) -> Result<JointCorpus> {
    if factors.is_empty() {
        return Err(Error::Config("at least one augmentation factor is required".into()));
    }
    for &f in factors {
        check_factor(f)?;
    }
    for e in base.iter().chain(new) {
        e.validate()?;
    }
    let base_paths: BTreeSet<&str> = base.iter().map(|e| e.audio.as_str()).collect();
    if let Some(dup) = new.iter().find(|e| base_paths.contains(e.audio.as_str())) {
        return Err(Error::PathCollision(dup.audio.clone()));
    }
    let selected = select_for_augmentation(new.len(), fraction, seed)?;
    let tag = |e: &ManifestEntry, origin| ManifestEntry {
        origin: Some(origin),
        ..e.clone()
    };
    let mut entries: Vec<ManifestEntry> = base.iter().map(|e| tag(e, Origin::Base)).collect();
    entries.extend(new.iter().map(|e| tag(e, Origin::New)));
    let mut augmented_hours = vec![0.0; factors.len()];
    let mut selected_s = 0.0;
    for &i in &selected {
        let src = &new[i];
        selected_s += src.duration_s;
        for (k, &f) in factors.iter().enumerate() {
            let duration_s = src.duration_s / f;
            augmented_hours[k] += duration_s / 3600.0;
            entries.push(ManifestEntry {
                audio: augmented_name(&src.audio, f),
                duration_s,
                text: src.text.clone(),
                origin: Some(Origin::Augmented),
                factor: Some(f),
                source: Some(src.audio.to_string()),
                seed: Some(seed),
            });
        }
    }
    let hours = |es: &[ManifestEntry]| es.iter().map(|e| e.duration_s).sum::<f64>() / 3600.0;
    let (base_hours, new_hours) = (hours(base), hours(new));
    let total_hours = base_hours + new_hours + augmented_hours.iter().sum::<f64>();
    let report = HoursReport {
        base_hours,
        new_hours,
        selected_hours: selected_s / 3600.0,
        augmented_hours: factors.iter().copied().zip(augmented_hours).collect(),
        total_hours,
        entries: entries.len(),
    };
    Ok(JointCorpus { entries, report })
}

/// Parameters of the synthetic tone corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub graphemes: Vec<char>,
    pub utterances: usize,
    /// Inclusive range of graphemes per utterance.
    pub min_graphemes: usize,
    pub max_graphemes: usize,
    pub sample_rate_hz: u32,
    pub tone_s: f64,
    pub gap_s: f64,
    pub edge_s: f64,
    pub amplitude: f64,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            graphemes: "ABCDEFGH".chars().collect(),
            utterances: 10,
            min_graphemes: 3,
            max_graphemes: 5,
            sample_rate_hz: crate::audio::DEFAULT_SAMPLE_RATE,
            tone_s: 0.15,
            gap_s: 0.05,
            edge_s: 0.1,
            amplitude: 0.5,
            noise_std: 0.005,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.graphemes.is_empty() || self.min_graphemes == 0 || self.min_graphemes > self.max_graphemes {
            return Err(Error::Config("synthetic corpus needs graphemes and 1 <= min <= max".into()));
        }
        if !(self.tone_s > 0.0 && self.gap_s >= 0.0 && self.edge_s >= 0.0) {
            return Err(Error::Config("tone, gap and edge durations must be non-negative".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude + 4.0 * self.noise_std <= 1.0) {
            return Err(Error::Config("amplitude must keep samples inside [-1, 1]".into()));
        }
        let top = self.tone_frequency(self.graphemes.len() - 1);
        if top >= 0.5 * self.sample_rate_hz as f64 {
            return Err(Error::Config(format!("tone {top} Hz above Nyquist")));
        }
        Ok(())
    }

    /// Tone of grapheme `k`: log-spaced from 400 Hz up to 0.45 × the
    /// sample rate (3600 Hz at 8 kHz).
    pub fn tone_frequency(&self, k: usize) -> f64 {
        let lo = 400.0;
        let hi = 0.45 * self.sample_rate_hz as f64;
        let n = self.graphemes.len();
        if n == 1 {
            return lo;
        }
        lo * libm::pow(hi / lo, k as f64 / (n - 1) as f64)
    }
}

/// A synthesized utterance with the sample span of each tone.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub text: String,
    pub waveform: Waveform,
    /// `(start, end, grapheme position)` in samples.
    pub tones: Vec<(usize, usize, usize)>,
}

/// Renders grapheme positions `seq` (indices into `spec.graphemes`) as
/// concatenated tones with short raised-cosine edges.
pub fn synth_utterance<R: Rng + ?Sized>(spec: &SynthSpec, seq: &[usize], rng: &mut R) -> Result<SynthUtterance> {
    let sr = spec.sample_rate_hz as f64;
    let n = |s: f64| libm::round(s * sr) as usize;
    let (tone, gap, edge) = (n(spec.tone_s), n(spec.gap_s), n(spec.edge_s));
    let total = 2 * edge + seq.len() * tone + seq.len().saturating_sub(1) * gap;
    let mut samples = vec![0.0; total.max(1)];
    let ramp = n(0.01).min(tone / 2).max(1);
    let mut tones = Vec::with_capacity(seq.len());
    let mut pos = edge;
    for &k in seq {
        if k >= spec.graphemes.len() {
            return Err(Error::Config(format!("grapheme position {k} out of range")));
        }
        let f = spec.tone_frequency(k);
        let phase: f64 = rng.random_range(0.0..core::f64::consts::TAU);
        for i in 0..tone {
            let env = if i < ramp {
                0.5 - 0.5 * libm::cos(core::f64::consts::PI * i as f64 / ramp as f64)
            } else if i >= tone - ramp {
                0.5 - 0.5 * libm::cos(core::f64::consts::PI * (tone - 1 - i) as f64 / ramp as f64)
            } else {
                1.0
            };
            let t = i as f64 / sr;
            samples[pos + i] = spec.amplitude * env * libm::sin(core::f64::consts::TAU * f * t + phase);
        }
        tones.push((pos, pos + tone, k));
        pos += tone + gap;
    }
    if spec.noise_std > 0.0 {
        for s in samples.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *s = (*s + spec.noise_std * z).clamp(-1.0, 1.0);
        }
    }
    Ok(SynthUtterance {
        text: seq.iter().map(|&k| spec.graphemes[k]).collect(),
        waveform: Waveform::new(samples, spec.sample_rate_hz)?,
        tones,
    })
}

/// A deterministic corpus of `spec.utterances` random grapheme strings.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthUtterance>> {
    spec.validate()?;
    (0..spec.utterances)
        .map(|u| {
            let mut rng = tagged(seed, purpose::SYNTH, 0, u as u64);
            let len = rng.random_range(spec.min_graphemes..=spec.max_graphemes);
            let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.graphemes.len())).collect();
            synth_utterance(spec, &seq, &mut rng)
        })
        .collect()
}
