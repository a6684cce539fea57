//! 39-dimensional MFCC features (13 cepstra, deltas, delta-deltas).

pub mod fft;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use fft::{fft_in_place, power_spectrum};

use crate::audio::Waveform;
use crate::error::{Error, Result};

pub const NUM_CEPSTRA: usize = 13;
pub const FEATURE_DIM: usize = 3 * NUM_CEPSTRA;

/// `T x 39` feature frames, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, frame_shift_s: f64, frame_length_s: f64) -> Result<Self> {
        if data.is_empty() || !data.len().is_multiple_of(FEATURE_DIM) {
            return Err(Error::Shape {
                op: "FeatureMatrix::new",
                detail: format!("{} values is not a positive multiple of {FEATURE_DIM}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        let frames = data.len() / FEATURE_DIM;
        Ok(Self {
            data,
            frames,
            frame_shift_s,
            frame_length_s,
        })
    }

    /// Builds a matrix with the default 10 ms / 25 ms framing.
    pub fn from_frames(data: Vec<f64>) -> Result<Self> {
        let cfg = MfccConfig::default();
        Self::new(data, cfg.hop_s, cfg.frame_s)
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(FEATURE_DIM)
    }

    pub(crate) fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }

    /// Per-utterance mean and variance normalization of every column.
    pub fn normalized(&self) -> FeatureMatrix {
        let t = self.frames as f64;
        let mut out = self.clone();
        for d in 0..FEATURE_DIM {
            let mean = self.rows().map(|r| r[d]).sum::<f64>() / t;
            let var = self.rows().map(|r| (r[d] - mean) * (r[d] - mean)).sum::<f64>() / t;
            let inv = 1.0 / libm::sqrt(var + 1e-8);
            for i in 0..self.frames {
                out.row_mut(i)[d] = (self.row(i)[d] - mean) * inv;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub frame_s: f64,
    pub hop_s: f64,
    pub pre_emphasis: f64,
    pub num_filters: usize,
    pub delta_width: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            frame_s: 0.025,
            hop_s: 0.010,
            pre_emphasis: 0.97,
            num_filters: 26,
            delta_width: 2,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self, sample_rate_hz: u32) -> usize {
        libm::round(self.frame_s * sample_rate_hz as f64) as usize
    }

    pub fn hop_len(&self, sample_rate_hz: u32) -> usize {
        libm::round(self.hop_s * sample_rate_hz as f64) as usize
    }

    pub fn fft_len(&self, sample_rate_hz: u32) -> usize {
        self.frame_len(sample_rate_hz).next_power_of_two()
    }
}

/// `1 + floor((n - window) / hop)`, or zero when the signal is shorter than a window.
pub fn frame_count(samples: usize, window: usize, hop: usize) -> usize {
    if samples < window {
        0
    } else {
        1 + (samples - window) / hop
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale from 0 Hz to Nyquist.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// Centre frequency of each filter, in Hz.
    pub centers_hz: Vec<f64>,
    /// `num_filters x (n_fft/2 + 1)` weights.
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(num_filters: usize, n_fft: usize, sample_rate_hz: u32) -> Self {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..num_filters + 2)
            .map(|i| mel_to_hz(top * i as f64 / (num_filters + 1) as f64))
            .collect();
        let bins = n_fft / 2 + 1;
        let bin_hz = sample_rate_hz as f64 / n_fft as f64;
        let weights = (0..num_filters)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            centers_hz: edges[1..=num_filters].to_vec(),
            weights,
        }
    }
}

struct Framing {
    frame_len: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
}

fn framing(w: &Waveform, cfg: &MfccConfig) -> Result<(Framing, usize)> {
    let frame_len = cfg.frame_len(w.sample_rate_hz());
    let hop = cfg.hop_len(w.sample_rate_hz());
    if frame_len < 2 || hop == 0 {
        return Err(Error::Config("frame and hop lengths must be positive".into()));
    }
    let frames = frame_count(w.len(), frame_len, hop);
    if frames == 0 {
        return Err(Error::TooShort {
            samples: w.len(),
            window: frame_len,
        });
    }
    let window = (0..frame_len)
        .map(|n| 0.54 - 0.46 * libm::cos(2.0 * PI * n as f64 / (frame_len - 1) as f64))
        .collect();
    Ok((
        Framing {
            frame_len,
            hop,
            n_fft: cfg.fft_len(w.sample_rate_hz()),
            window,
        },
        frames,
    ))
}

/// Log mel filterbank energies (`T x num_filters`) and log frame energies (`T`).
pub fn log_mel_energies(w: &Waveform, cfg: &MfccConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (fr, frames) = framing(w, cfg)?;
    let bank = MelFilterbank::new(cfg.num_filters, fr.n_fft, w.sample_rate_hz());
    let x = w.samples();
    let mut mel = Vec::with_capacity(frames);
    let mut energy = Vec::with_capacity(frames);
    let mut buf = vec![0.0; fr.frame_len];
    for t in 0..frames {
        let raw = &x[t * fr.hop..t * fr.hop + fr.frame_len];
        let e: f64 = raw.iter().map(|v| v * v).sum();
        energy.push(libm::log(e.max(cfg.log_floor)));
        // pre-emphasis within the frame, so identical frames stay identical
        for n in 0..fr.frame_len {
            let prev = if n == 0 { raw[0] } else { raw[n - 1] };
            buf[n] = (raw[n] - cfg.pre_emphasis * prev) * fr.window[n];
        }
        let power = power_spectrum(&buf, fr.n_fft);
        mel.push(
            bank.weights
                .iter()
                .map(|wts| {
                    let s: f64 = wts.iter().zip(&power).map(|(a, b)| a * b).sum();
                    libm::log(s.max(cfg.log_floor))
                })
                .collect(),
        );
    }
    Ok((mel, energy))
}

/// Regression deltas over `±width` frames with edge replication.
pub fn deltas(seq: &[Vec<f64>], width: usize) -> Vec<Vec<f64>> {
    let t_len = seq.len();
    let denom: f64 = 2.0 * (1..=width).map(|n| (n * n) as f64).sum::<f64>();
    (0..t_len)
        .map(|t| {
            let dim = seq[t].len();
            (0..dim)
                .map(|d| {
                    let mut acc = 0.0;
                    for n in 1..=width {
                        let fwd = &seq[(t + n).min(t_len - 1)];
                        let back = &seq[t.saturating_sub(n)];
                        acc += n as f64 * (fwd[d] - back[d]);
                    }
                    acc / denom
                })
                .collect()
        })
        .collect()
}

/// 39-dimensional MFCC: 13 cepstra (c0 replaced by log frame energy),
/// deltas and delta-deltas.
pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    let (mel, energy) = log_mel_energies(w, cfg)?;
    let m = cfg.num_filters as f64;
    let scale = libm::sqrt(2.0 / m);
    let ceps: Vec<Vec<f64>> = mel
        .iter()
        .zip(&energy)
        .map(|(row, &e)| {
            let mut c: Vec<f64> = (0..NUM_CEPSTRA)
                .map(|k| {
                    scale
                        * row
                            .iter()
                            .enumerate()
                            .map(|(i, v)| v * libm::cos(PI * k as f64 * (i as f64 + 0.5) / m))
                            .sum::<f64>()
                })
                .collect();
            c[0] = e;
            c
        })
        .collect();
    let d1 = deltas(&ceps, cfg.delta_width);
    let d2 = deltas(&d1, cfg.delta_width);
    let mut data = Vec::with_capacity(ceps.len() * FEATURE_DIM);
    for t in 0..ceps.len() {
        data.extend_from_slice(&ceps[t]);
        data.extend_from_slice(&d1[t]);
        data.extend_from_slice(&d2[t]);
    }
    FeatureMatrix::new(data, cfg.hop_s, cfg.frame_s)
}
