//! Training objectives assembled from the model, the CTC loss and the
//! masked reconstruction loss.

use alloc::vec::Vec;

use crate::ctc::{ctc_loss_on_tape, required_frames};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::grad::{HasParams, ParamStore, Tape, Var};
use crate::mask::{apply_mask, masked_mae_on_tape, MaeNormalization, MaskedSample};
use crate::model::{Model, Pass};
use crate::rng::{purpose, tagged};

impl HasParams for Model {
    fn params(&self) -> &ParamStore {
        self.store()
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self.store_mut()
    }
}

/// Mean loss of the usable part of a batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: Var,
    /// Positions (within the batch) that contributed.
    pub used: Vec<usize>,
    /// Positions skipped because the label cannot fit in `T'` frames.
    pub skipped: Vec<usize>,
}

/// Mean of `values` on the tape.
fn mean_of(tape: &mut Tape, values: &[Var]) -> Result<Var> {
    let mut acc = values[0];
    for &v in &values[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / values.len() as f64))
}

/// Mean CTC loss of a labelled batch. Returns `None` when every label is
/// longer than its utterance allows.
pub fn ctc_objective(
    model: &Model,
    tape: &mut Tape,
    batch: &[&FeatureMatrix],
    labels: &[&[usize]],
    pass: &mut Pass<'_>,
) -> Result<Option<BatchLoss>> {
    if batch.len() != labels.len() {
        return Err(Error::Shape {
            op: "ctc_objective",
            detail: alloc::format!("{} inputs, {} labels", batch.len(), labels.len()),
        });
    }
    let (mut used, mut skipped) = (Vec::new(), Vec::new());
    for (i, (f, l)) in batch.iter().zip(labels).enumerate() {
        if l.is_empty() {
            return Err(Error::EmptyTranscript);
        }
        if required_frames(l) <= model.config().output_frames(f.num_frames()) {
            used.push(i);
        } else {
            skipped.push(i);
        }
    }
    if used.is_empty() {
        return Ok(None);
    }
    let inputs: Vec<&FeatureMatrix> = used.iter().map(|&i| batch[i]).collect();
    let out = model.backbone_forward(tape, &inputs, pass)?;
    let mut losses = Vec::with_capacity(used.len());
    for (k, &i) in used.iter().enumerate() {
        let probs = model.prediction_forward(tape, out.sequences[k])?;
        losses.push(ctc_loss_on_tape(tape, probs, labels[i])?);
    }
    let loss = mean_of(tape, &losses)?;
    Ok(Some(BatchLoss {
        loss,
        used,
        skipped,
    }))
}

/// Fresh masks for a batch. Sample `index` in `epoch` draws from its own
/// stream, so masks are regenerated on every feed yet reproducible.
pub fn mask_batch(
    batch: &[&FeatureMatrix],
    indices: &[usize],
    global_seed: u64,
    stream_purpose: u64,
    epoch: u64,
) -> Vec<MaskedSample> {
    batch
        .iter()
        .zip(indices)
        .map(|(f, &i)| {
            let mut rng = tagged(global_seed, stream_purpose, epoch, i as u64);
            apply_mask(f, &mut rng)
        })
        .collect()
}

/// Mean masked reconstruction error: noisy features through the backbone
/// and decoder, scored against the clean features on masked frames.
pub fn pretrain_objective(
    model: &Model,
    tape: &mut Tape,
    samples: &[MaskedSample],
    norm: MaeNormalization,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("batch"));
    }
    let noisy: Vec<&FeatureMatrix> = samples.iter().map(|s| &s.noisy).collect();
    let out = model.backbone_forward(tape, &noisy, pass)?;
    let mut losses = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let skips: Vec<Var> = out.skips.iter().map(|l| l[k]).collect();
        let recon = model.dae_decode(tape, out.sequences[k], &skips, out.frames[k])?;
        losses.push(masked_mae_on_tape(tape, &s.clean, recon, &s.mask, norm)?);
    }
    mean_of(tape, &losses)
}

/// [`pretrain_objective`] with masks drawn from the `MASK` streams.
pub fn pretrain_objective_seeded(
    model: &Model,
    tape: &mut Tape,
    batch: &[&FeatureMatrix],
    indices: &[usize],
    global_seed: u64,
    epoch: u64,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let samples = mask_batch(batch, indices, global_seed, purpose::MASK, epoch);
    pretrain_objective(model, tape, &samples, MaeNormalization::default(), pass)
}
