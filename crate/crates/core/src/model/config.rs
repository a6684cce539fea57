use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audio::DEFAULT_SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::features::FEATURE_DIM;

/// Kernel size of the decoder's transposed convolutions.
pub const DECODER_KERNEL: (usize, usize) = (3, 3);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub kernel_time: usize,
    pub kernel_freq: usize,
    pub channels: usize,
}

impl BranchConfig {
    pub const fn new(kernel_time: usize, kernel_freq: usize, channels: usize) -> Self {
        Self {
            kernel_time,
            kernel_freq,
            channels,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Same,
}

/// One multiscale convolution layer: parallel branches concatenated on the
/// channel axis. The stride applies to the time axis only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McnnLayerConfig {
    pub branches: Vec<BranchConfig>,
    pub stride: usize,
    #[serde(default)]
    pub padding: Padding,
}

impl McnnLayerConfig {
    /// Branches 1×1@16, 11×3@32, 13×3@32, 13×1@16.
    pub fn paper(stride: usize) -> Self {
        Self::scaled(stride, 1)
    }

    /// The full-size branch shapes with channel counts divided by `divisor`.
    pub fn scaled(stride: usize, divisor: usize) -> Self {
        let c = |n: usize| (n / divisor).max(1);
        Self {
            branches: vec![
                BranchConfig::new(1, 1, c(16)),
                BranchConfig::new(11, 3, c(32)),
                BranchConfig::new(13, 3, c(32)),
                BranchConfig::new(13, 1, c(16)),
            ],
            stride,
            padding: Padding::Same,
        }
    }

    pub fn channels(&self) -> usize {
        self.branches.iter().map(|b| b.channels).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mcnn_layers: Vec<McnnLayerConfig>,
    pub blstm_layers: usize,
    pub blstm_hidden: usize,
    /// Output classes including the blank at index 0.
    pub vocab_size: usize,
    pub dropout: f64,
    pub sample_rate_hz: u32,
    #[serde(default = "yes")]
    pub dae_decoder: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Two MCNN layers (strides 2, 1) and five BLSTM layers of 512 units.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            mcnn_layers: vec![McnnLayerConfig::paper(2), McnnLayerConfig::paper(1)],
            blstm_layers: 5,
            blstm_hidden: 512,
            vocab_size,
            dropout: 0.1,
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            dae_decoder: true,
        }
    }

    /// Two MCNN layers with a quarter of the full-size channels and two
    /// BLSTM layers of 64 units.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            mcnn_layers: vec![McnnLayerConfig::scaled(2, 4), McnnLayerConfig::scaled(1, 4)],
            blstm_layers: 2,
            blstm_hidden: 64,
            ..Self::paper(vocab_size)
        }
    }

    /// A very small network for gradient checks and unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        let layer = |stride| McnnLayerConfig {
            branches: vec![
                BranchConfig::new(1, 1, 1),
                BranchConfig::new(3, 3, 2),
                BranchConfig::new(3, 1, 1),
            ],
            stride,
            padding: Padding::Same,
        };
        Self {
            mcnn_layers: vec![layer(2), layer(1)],
            blstm_layers: 1,
            blstm_hidden: 4,
            vocab_size,
            dropout: 0.0,
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            dae_decoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.mcnn_layers.is_empty() {
            return bad("at least one MCNN layer is required".into());
        }
        for (i, l) in self.mcnn_layers.iter().enumerate() {
            if l.stride == 0 || l.branches.is_empty() {
                return bad(format!("MCNN layer {i}: stride and branch list must be non-empty"));
            }
            if l.branches
                .iter()
                .any(|b| b.kernel_time == 0 || b.kernel_freq == 0 || b.channels == 0)
            {
                return bad(format!("MCNN layer {i}: zero kernel extent or channel count"));
            }
        }
        if self.blstm_layers == 0 || self.blstm_hidden == 0 {
            return bad("BLSTM stack must have at least one layer and one unit".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive".into());
        }
        Ok(())
    }

    /// Channel count after each MCNN layer.
    pub fn mcnn_channels(&self) -> Vec<usize> {
        self.mcnn_layers.iter().map(McnnLayerConfig::channels).collect()
    }

    /// Temporal extent after each MCNN layer for an input of `frames`.
    pub fn mcnn_extents(&self, frames: usize) -> Vec<usize> {
        let mut t = frames;
        self.mcnn_layers
            .iter()
            .map(|l| {
                t = t.div_ceil(l.stride);
                t
            })
            .collect()
    }

    /// Backbone output length for an input of `frames` frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        *self.mcnn_extents(frames).last().unwrap_or(&frames)
    }

    /// Width of the backbone output sequence.
    pub fn backbone_width(&self) -> usize {
        self.blstm_hidden
    }

    /// Number of learnable scalars (batch-norm running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.backbone_parameter_count() + self.head_parameter_count() + self.decoder_parameter_count()
    }

    pub fn backbone_parameter_count(&self) -> usize {
        let mut total = 0;
        let mut cin = 1;
        for l in &self.mcnn_layers {
            let cout = l.channels();
            total += l
                .branches
                .iter()
                .map(|b| b.channels * cin * b.kernel_time * b.kernel_freq)
                .sum::<usize>();
            total += cout * cin; // residual projection
            total += 2 * cout; // batch norm
            cin = cout;
        }
        let h = self.blstm_hidden;
        let mut d = cin * FEATURE_DIM;
        for _ in 0..self.blstm_layers {
            total += 2 * (d * 4 * h + h * 4 * h + 4 * h);
            total += 2 * h * h + h; // direction merge
            total += 2 * h; // batch norm
            d = h;
        }
        total
    }

    pub fn head_parameter_count(&self) -> usize {
        self.blstm_hidden * self.vocab_size + self.vocab_size
    }

    pub fn decoder_parameter_count(&self) -> usize {
        if !self.dae_decoder {
            return 0;
        }
        let ch = self.mcnn_channels();
        let top = *ch.last().unwrap() * FEATURE_DIM;
        let mut total = self.blstm_hidden * top + top;
        let (kt, kf) = DECODER_KERNEL;
        for (i, &c) in ch.iter().enumerate() {
            let below = if i == 0 { c } else { ch[i - 1] };
            total += c * c; // skip projection
            total += c * below * kt * kf + below;
        }
        total + ch[0] + 1
    }
}
