//! Waveforms and time-domain processing.

mod resample;
mod vad;

use alloc::format;
use alloc::vec::Vec;

pub use resample::{speed_perturb, MAX_SPEED_FACTOR, MIN_SPEED_FACTOR};
pub use vad::{frame_energies, vad_segment, SegmentSpan, VadConfig};

use crate::error::{Error, Result};

/// Default sample rate. Narrow-band radio speech carries content up to 4 kHz.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if let Some((i, v)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidWaveform(format!(
                "sample {i} = {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Sub-waveform covering `[start_s, end_s)`, clamped to the signal.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> Result<Self> {
        let sr = self.sample_rate_hz as f64;
        let a = (libm::round(start_s * sr).max(0.0) as usize).min(self.samples.len());
        let b = (libm::round(end_s * sr).max(0.0) as usize).min(self.samples.len());
        Self::new(self.samples[a..b.max(a)].to_vec(), self.sample_rate_hz)
    }
}
