//! Dynamic frame masking and the masked reconstruction objective used for
//! denoising pretraining.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FEATURE_DIM};
use crate::grad::{Array, Tape, Var};

/// Fraction of frames selected for masking.
pub const MASK_RATIO: f64 = 0.15;

/// Per-dimension mean and population standard deviation of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStats {
    pub mu: Vec<f64>,
    pub delta: Vec<f64>,
}

pub fn compute_noise_stats(clean: &FeatureMatrix) -> NoiseStats {
    let t = clean.num_frames() as f64;
    // Shifted by the first frame so constant columns give exact statistics.
    let first = clean.row(0);
    let mut mu = vec![0.0; FEATURE_DIM];
    for row in clean.rows() {
        for d in 0..FEATURE_DIM {
            mu[d] += row[d] - first[d];
        }
    }
    for d in 0..FEATURE_DIM {
        mu[d] = first[d] + mu[d] / t;
    }
    let mut delta = vec![0.0; FEATURE_DIM];
    for row in clean.rows() {
        for d in 0..FEATURE_DIM {
            delta[d] += (row[d] - mu[d]) * (row[d] - mu[d]);
        }
    }
    delta.iter_mut().for_each(|v| *v = libm::sqrt(*v / t));
    NoiseStats { mu, delta }
}

/// Number of masked frames for an utterance of `frames` frames:
/// `round(0.15 * T)`, at least one.
pub fn mask_count(frames: usize) -> usize {
    if frames == 0 {
        return 0;
    }
    (libm::round(MASK_RATIO * frames as f64) as usize).clamp(1, frames)
}

/// Which replacement a selected frame received.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskBranch {
    /// `p >= 0.9`: the raw frame is kept.
    Keep,
    /// `0.8 <= p < 0.9`: the zero vector.
    Zero,
    /// `p < 0.8`: neighbour average plus Gaussian noise.
    Noise,
}

impl MaskBranch {
    pub fn for_draw(p: f64) -> Self {
        if p >= 0.9 {
            MaskBranch::Keep
        } else if p >= 0.8 {
            MaskBranch::Zero
        } else {
            MaskBranch::Noise
        }
    }
}

/// Per-frame 0/1 indicators of loss-bearing frames.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskVector {
    bits: Vec<bool>,
}

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; len];
        for &i in indices {
            bits[i] = true;
        }
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, t: usize) -> bool {
        self.bits[t]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSample {
    pub noisy: FeatureMatrix,
    pub clean: FeatureMatrix,
    pub mask: MaskVector,
    /// Branch taken by each masked frame, in ascending frame order.
    pub branches: Vec<(usize, MaskBranch)>,
}

/// Masks `round(0.15 T)` distinct frames chosen uniformly at random.
///
/// Draw order: the frame subset, then for each selected frame in ascending
/// order its branch variable `p`, then (noise branch only) 39 standard
/// normals.
pub fn apply_mask<R: Rng + ?Sized>(clean: &FeatureMatrix, rng: &mut R) -> MaskedSample {
    let t = clean.num_frames();
    let mut selected = rand::seq::index::sample(rng, t, mask_count(t)).into_vec();
    selected.sort_unstable();
    let draws: Vec<f64> = selected.iter().map(|_| rng.random::<f64>()).collect();
    apply_mask_with(clean, &selected, &draws, rng)
}

/// [`apply_mask`] with the frame subset and branch draws supplied.
///
/// Neighbours always come from the clean matrix; a missing neighbour at
/// either edge is replaced by the one that exists, and a single-frame
/// utterance uses the frame itself.
pub fn apply_mask_with<R: Rng + ?Sized>(
    clean: &FeatureMatrix,
    selected: &[usize],
    draws: &[f64],
    rng: &mut R,
) -> MaskedSample {
    let t_len = clean.num_frames();
    let stats = compute_noise_stats(clean);
    let mut noisy = clean.clone();
    let mut branches = Vec::with_capacity(selected.len());
    for (&t, &p) in selected.iter().zip(draws) {
        let branch = MaskBranch::for_draw(p);
        match branch {
            MaskBranch::Keep => {}
            MaskBranch::Zero => noisy.row_mut(t).fill(0.0),
            MaskBranch::Noise => {
                let left = (t > 0).then(|| clean.row(t - 1));
                let right = (t + 1 < t_len).then(|| clean.row(t + 1));
                let (l, r) = match (left, right) {
                    (Some(l), Some(r)) => (l, r),
                    (Some(l), None) => (l, l),
                    (None, Some(r)) => (r, r),
                    (None, None) => (clean.row(t), clean.row(t)),
                };
                let row = noisy.row_mut(t);
                for d in 0..FEATURE_DIM {
                    let z: f64 = StandardNormal.sample(rng);
                    let xi = stats.mu[d] + stats.delta[d] * z;
                    row[d] = 0.5 * (l[d] + r[d]) + xi;
                }
            }
        }
        branches.push((t, branch));
    }
    MaskedSample {
        noisy,
        clean: clean.clone(),
        mask: MaskVector::from_indices(t_len, selected),
        branches,
    }
}

/// Normalization of the masked absolute error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeNormalization {
    /// Mean over dimensions, then over masked frames.
    #[default]
    PerMaskedFrame,
    /// Plain sum over masked frames and dimensions.
    Sum,
}

fn mae_weights(mask: &MaskVector, norm: MaeNormalization) -> Vec<f64> {
    let count = mask.ones();
    let w = match norm {
        _ if count == 0 => 0.0,
        MaeNormalization::PerMaskedFrame => 1.0 / (count * FEATURE_DIM) as f64,
        MaeNormalization::Sum => 1.0,
    };
    let mut out = vec![0.0; mask.len() * FEATURE_DIM];
    for t in mask.indices() {
        out[t * FEATURE_DIM..(t + 1) * FEATURE_DIM].fill(w);
    }
    out
}

fn check_mae_shapes(clean: &FeatureMatrix, recon_frames: usize, mask: &MaskVector) -> Result<()> {
    if clean.num_frames() != recon_frames || mask.len() != recon_frames {
        return Err(Error::Shape {
            op: "masked_mae_loss",
            detail: alloc::format!(
                "clean {} frames, reconstruction {recon_frames}, mask {}",
                clean.num_frames(),
                mask.len()
            ),
        });
    }
    Ok(())
}

/// Masked mean absolute error of one utterance.
pub fn masked_mae_loss(
    clean: &FeatureMatrix,
    recon: &FeatureMatrix,
    mask: &MaskVector,
    norm: MaeNormalization,
) -> Result<f64> {
    check_mae_shapes(clean, recon.num_frames(), mask)?;
    let w = mae_weights(mask, norm);
    Ok(clean
        .data()
        .iter()
        .zip(recon.data())
        .zip(&w)
        .map(|((c, r), w)| w * libm::fabs(c - r))
        .sum())
}

/// [`masked_mae_loss`] recorded on the tape; `recon` is a `[T, 39]` node.
pub fn masked_mae_on_tape(
    tape: &mut Tape,
    clean: &FeatureMatrix,
    recon: Var,
    mask: &MaskVector,
    norm: MaeNormalization,
) -> Result<Var> {
    let shape = tape.shape(recon).to_vec();
    if shape != [clean.num_frames(), FEATURE_DIM] {
        return Err(Error::Shape {
            op: "masked_mae_loss",
            detail: alloc::format!("reconstruction {shape:?} vs {} frames", clean.num_frames()),
        });
    }
    check_mae_shapes(clean, shape[0], mask)?;
    let target = tape.constant(Array::new(shape.clone(), clean.data().to_vec())?)?;
    let weights = tape.constant(Array::new(shape, mae_weights(mask, norm))?)?;
    let diff = tape.sub(recon, target)?;
    let abs = tape.abs(diff);
    let weighted = tape.mul(abs, weights)?;
    Ok(tape.sum(weighted))
}
