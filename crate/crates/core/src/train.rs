//! Training loops: denoising pretraining, supervised CTC training and
//! transfer with a frozen backbone, plus greedy-decoding evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cer::{cer, CerReport};
use crate::ctc::{greedy_decode, ProbGrid};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::grad::{Adam, AdamConfig, ParamStore, Tape};
use crate::mask::{MaeNormalization, MaskedSample};
use crate::model::{Model, ModelConfig, Pass, Section};
use crate::objective::{ctc_objective, mask_batch, pretrain_objective};
use crate::rng::{purpose, tagged};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Supervised,
    Transfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Paper,
    Desk,
    Tiny,
}

impl ModelPreset {
    pub fn config(self, vocab_size: usize) -> ModelConfig {
        match self {
            ModelPreset::Paper => ModelConfig::paper(vocab_size),
            ModelPreset::Desk => ModelConfig::desk(vocab_size),
            ModelPreset::Tiny => ModelConfig::tiny(vocab_size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Leading epochs with the backbone frozen.
    pub freeze_epochs: usize,
    /// Epochs without improvement before stopping; 0 disables stopping.
    pub early_stop_patience: usize,
    /// Fraction held out for validation when no explicit set is given.
    pub validation_fraction: f64,
    pub seed: u64,
    pub preset: ModelPreset,
    pub adam: AdamConfig,
    pub mae_normalization: MaeNormalization,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::for_mode(TrainMode::Supervised)
    }
}

impl TrainingConfig {
    /// Full-size regime for `mode`: pretraining at lr 1e-3 with batch 96,
    /// supervised and transfer training at lr 5e-5 with batch 160, and a
    /// ten-epoch freeze in transfer mode.
    pub fn for_mode(mode: TrainMode) -> Self {
        let (lr, batch) = match mode {
            TrainMode::Pretrain => (1e-3, 96),
            TrainMode::Supervised | TrainMode::Transfer => (5e-5, 160),
        };
        Self {
            mode,
            learning_rate: lr,
            batch_size: batch,
            max_epochs: 100,
            freeze_epochs: if mode == TrainMode::Transfer { 10 } else { 0 },
            early_stop_patience: 5,
            validation_fraction: 0.1,
            seed: 0,
            preset: ModelPreset::Desk,
            adam: AdamConfig::default(),
            mae_normalization: MaeNormalization::default(),
        }
    }

    /// [`TrainingConfig::for_mode`] with the desk batch size of 8.
    pub fn desk(mode: TrainMode) -> Self {
        Self {
            batch_size: 8,
            ..Self::for_mode(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.freeze_epochs >= self.max_epochs {
            return Err(Error::Config(format!(
                "freeze_epochs {} must be below max_epochs {}",
                self.freeze_epochs, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..self.adam
        }
    }
}

/// One utterance held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub duration_s: f64,
    pub label: Option<Vec<usize>>,
}

/// Iteration order of one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    /// 1-based.
    pub epoch: usize,
    pub order: Vec<usize>,
}

impl EpochPlan {
    /// Epoch 1 visits samples by ascending duration (stable on ties); later
    /// epochs use a permutation drawn from `(seed, epoch)`.
    pub fn new(epoch: usize, durations: &[f64], seed: u64) -> Self {
        let mut order: Vec<usize> = (0..durations.len()).collect();
        if epoch <= 1 {
            order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));
        } else {
            let mut rng = tagged(seed, purpose::SHUFFLE, epoch as u64, 0);
            order.shuffle(&mut rng);
        }
        Self { epoch, order }
    }

    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(batch_size.max(1))
    }
}

/// Splits `0..n` into training and validation indices. The validation part
/// has `round(fraction * n)` members drawn by `seed`; both parts keep
/// ascending index order.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = (libm::round(fraction * n as f64) as usize).min(n.saturating_sub(1));
    let mut rng = tagged(seed, purpose::SPLIT, 0, 0);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let mut is_val = alloc::vec![false; n];
    for &i in &picked {
        is_val[i] = true;
    }
    let train = (0..n).filter(|&i| !is_val[i]).collect();
    (train, picked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub steps: usize,
    /// Samples skipped because their label does not fit.
    pub skipped: usize,
    pub backbone_frozen: bool,
}

/// Returned by the per-epoch callback.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Validation loss before the first update, when a validation set exists.
    pub initial_val_loss: Option<f64>,
    pub history: Vec<EpochReport>,
    /// Epoch whose weights the model holds on return (0 = initial weights).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct EarlyStop {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since: usize,
    snapshot: Option<ParamStore>,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since: 0,
            snapshot: None,
        }
    }

    /// Records an epoch; returns true when training should stop.
    fn observe(&mut self, epoch: usize, loss: f64, model: &Model, may_stop: bool) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since = 0;
            self.snapshot = Some(model.store().clone());
        } else {
            self.since += 1;
        }
        may_stop && self.patience > 0 && self.since >= self.patience
    }

    fn restore(self, model: &mut Model) -> usize {
        if let Some(snap) = self.snapshot {
            for (id, p) in snap.iter() {
                let dst = model.store_mut().get_mut(id);
                *dst.value_mut() = p.value().clone();
            }
        }
        self.best_epoch
    }
}

fn check_loss(loss: f64, epoch: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss { epoch })
    }
}

fn held_out_masks(val: &[&FeatureMatrix], indices: &[usize], seed: u64) -> Vec<MaskedSample> {
    mask_batch(val, indices, seed, purpose::HELDOUT_MASK, 0)
}

/// Mean masked reconstruction error in evaluation mode, over fixed masks.
pub fn masked_mae_eval(
    model: &Model,
    samples: &[MaskedSample],
    norm: MaeNormalization,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let loss = pretrain_objective(model, &mut tape, chunk, norm, &mut Pass::eval())?;
        total += tape.value(loss).item().unwrap_or(f64::NAN) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Denoising pretraining of the backbone and decoder.
///
/// Masks are regenerated on every feed from the `MASK` stream of
/// `(seed, epoch, sample index)`. Early stopping watches the masked error
/// on `val` under fixed held-out masks (or the training loss when `val` is
/// empty). The prediction head is left untouched.
pub fn pretrain<F>(
    config: &TrainingConfig,
    model: &mut Model,
    train: &[Utterance],
    val: &[Utterance],
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Model, &EpochReport) -> Result<Control>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("pretraining set"));
    }
    if !model.has_decoder() {
        return Err(Error::Config("pretraining needs the reconstruction decoder".into()));
    }
    model.set_head_trainable(false);
    model.set_decoder_trainable(true);
    model.set_backbone_trainable(true);
    let norm = config.mae_normalization;
    let val_feats: Vec<&FeatureMatrix> = val.iter().map(|u| &u.features).collect();
    let val_idx: Vec<usize> = (0..val.len()).collect();
    let val_masks = held_out_masks(&val_feats, &val_idx, config.seed);
    let eval_val = |m: &Model| -> Result<Option<f64>> {
        if val_masks.is_empty() {
            return Ok(None);
        }
        masked_mae_eval(m, &val_masks, norm, config.batch_size).map(Some)
    };

    let durations: Vec<f64> = train.iter().map(|u| u.duration_s).collect();
    let mut adam = Adam::new(config.adam());
    let mut stop = EarlyStop::new(config.early_stop_patience);
    let initial_val_loss = eval_val(model)?;
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let plan = EpochPlan::new(epoch, &durations, config.seed);
        let (mut sum, mut count, mut steps) = (0.0, 0usize, 0usize);
        for batch in plan.batches(config.batch_size) {
            let feats: Vec<&FeatureMatrix> = batch.iter().map(|&i| &train[i].features).collect();
            let samples = mask_batch(&feats, batch, config.seed, purpose::MASK, epoch as u64);
            model.store_mut().zero_grad();
            let mut tape = Tape::new();
            let mut rng = tagged(config.seed, purpose::DROPOUT, epoch as u64, steps as u64);
            let mut pass = Pass::train(&mut rng);
            let loss = pretrain_objective(model, &mut tape, &samples, norm, &mut pass)?;
            let value = check_loss(tape.value(loss).item().unwrap_or(f64::NAN), epoch)?;
            let updates = pass.into_updates();
            tape.backward(loss, model.store_mut())?;
            adam.step(model.store_mut())?;
            model.apply_running_updates(updates)?;
            sum += value * batch.len() as f64;
            count += batch.len();
            steps += 1;
        }
        let report = EpochReport {
            epoch,
            train_loss: sum / count as f64,
            val_loss: eval_val(model)?,
            steps,
            skipped: 0,
            backbone_frozen: false,
        };
        log::debug!(
            "pretrain epoch {epoch}: train {:.6} val {:?}",
            report.train_loss,
            report.val_loss
        );
        let monitored = report.val_loss.unwrap_or(report.train_loss);
        let halt = stop.observe(epoch, monitored, model, true);
        let control = on_epoch(model, &report)?;
        history.push(report);
        if halt {
            stopped_early = true;
            break;
        }
        if control == Control::Stop {
            break;
        }
    }
    let best_epoch = stop.restore(model);
    Ok(TrainOutcome {
        initial_val_loss,
        history,
        best_epoch,
        stopped_early,
    })
}

fn labels_of(data: &[Utterance]) -> Result<Vec<&[usize]>> {
    data.iter()
        .map(|u| match &u.label {
            Some(l) if !l.is_empty() => Ok(l.as_slice()),
            _ => Err(Error::EmptyTranscript),
        })
        .collect()
}

/// Mean CTC loss over a labelled set in evaluation mode; infeasible labels
/// are skipped. `None` when nothing is usable.
pub fn ctc_eval(model: &Model, data: &[Utterance], batch_size: usize) -> Result<Option<f64>> {
    let labels = labels_of(data)?;
    let (mut total, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let feats: Vec<&FeatureMatrix> = chunk.iter().map(|&i| &data[i].features).collect();
        let labs: Vec<&[usize]> = chunk.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        if let Some(b) = ctc_objective(model, &mut tape, &feats, &labs, &mut Pass::eval())? {
            total += tape.value(b.loss).item().unwrap_or(f64::NAN) * b.used.len() as f64;
            count += b.used.len();
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Supervised CTC training. In transfer mode the backbone is frozen for
/// the first `freeze_epochs` epochs and released afterwards; early stopping
/// is only considered once the backbone is trainable.
pub fn train_ctc<F>(
    config: &TrainingConfig,
    model: &mut Model,
    train: &[Utterance],
    val: &[Utterance],
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Model, &EpochReport) -> Result<Control>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    let labels = labels_of(train)?;
    labels_of(val)?;
    let vocab = model.config().vocab_size;
    for l in labels.iter().chain(val.iter().filter_map(|u| u.label.as_deref()).collect::<Vec<_>>().iter()) {
        if let Some(&bad) = l.iter().find(|&&k| k == 0 || k >= vocab) {
            return Err(Error::Config(format!("label index {bad} outside 1..{vocab}")));
        }
    }
    model.set_head_trainable(true);
    if model.has_decoder() {
        model.set_decoder_trainable(false);
    }
    let durations: Vec<f64> = train.iter().map(|u| u.duration_s).collect();
    let mut adam = Adam::new(config.adam());
    let mut stop = EarlyStop::new(config.early_stop_patience);
    let initial_val_loss = if val.is_empty() {
        None
    } else {
        ctc_eval(model, val, config.batch_size)?
    };
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let frozen = epoch <= config.freeze_epochs;
        model.set_backbone_trainable(!frozen);
        let plan = EpochPlan::new(epoch, &durations, config.seed);
        let (mut sum, mut count, mut steps, mut skipped) = (0.0, 0usize, 0usize, 0usize);
        for batch in plan.batches(config.batch_size) {
            let feats: Vec<&FeatureMatrix> = batch.iter().map(|&i| &train[i].features).collect();
            let labs: Vec<&[usize]> = batch.iter().map(|&i| labels[i]).collect();
            model.store_mut().zero_grad();
            let mut tape = Tape::new();
            let mut rng = tagged(config.seed, purpose::DROPOUT, epoch as u64, steps as u64);
            let mut pass = Pass::train(&mut rng);
            let Some(b) = ctc_objective(model, &mut tape, &feats, &labs, &mut pass)? else {
                skipped += batch.len();
                continue;
            };
            skipped += b.skipped.len();
            let value = check_loss(tape.value(b.loss).item().unwrap_or(f64::NAN), epoch)?;
            let updates = pass.into_updates();
            tape.backward(b.loss, model.store_mut())?;
            adam.step(model.store_mut())?;
            model.apply_running_updates(updates)?;
            sum += value * b.used.len() as f64;
            count += b.used.len();
            steps += 1;
        }
        if count == 0 {
            return Err(Error::EmptyDataset("training set (every label exceeds its utterance)"));
        }
        if skipped > 0 {
            log::warn!("epoch {epoch}: skipped {skipped} samples with labels longer than T'");
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            ctc_eval(model, val, config.batch_size)?
        };
        let report = EpochReport {
            epoch,
            train_loss: sum / count as f64,
            val_loss,
            steps,
            skipped,
            backbone_frozen: frozen,
        };
        log::debug!(
            "train epoch {epoch}: train {:.6} val {:?}{}",
            report.train_loss,
            report.val_loss,
            if frozen { " (backbone frozen)" } else { "" }
        );
        let monitored = report.val_loss.unwrap_or(report.train_loss);
        let halt = stop.observe(epoch, monitored, model, !frozen);
        let control = on_epoch(model, &report)?;
        history.push(report);
        if halt {
            stopped_early = true;
            break;
        }
        if control == Control::Stop {
            break;
        }
    }
    model.set_backbone_trainable(true);
    let best_epoch = stop.restore(model);
    Ok(TrainOutcome {
        initial_val_loss,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Supervised training from the model's current weights (no freezing).
pub fn train_supervised<F>(
    config: &TrainingConfig,
    model: &mut Model,
    train: &[Utterance],
    val: &[Utterance],
    on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Model, &EpochReport) -> Result<Control>,
{
    let config = TrainingConfig {
        freeze_epochs: 0,
        ..config.clone()
    };
    train_ctc(&config, model, train, val, on_epoch)
}

/// Transfer training: `model` is built fresh for the target vocabulary,
/// its backbone is copied from `baseline`, the prediction head is redrawn,
/// and training runs with the freeze schedule of `config`.
pub fn transfer<F>(
    config: &TrainingConfig,
    model: &mut Model,
    baseline: &Model,
    train: &[Utterance],
    val: &[Utterance],
    on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Model, &EpochReport) -> Result<Control>,
{
    prepare_transfer(model, baseline, config.seed)?;
    train_ctc(config, model, train, val, on_epoch)
}

/// Copies the backbone of `baseline` into `model` and redraws the head.
pub fn prepare_transfer(model: &mut Model, baseline: &Model, seed: u64) -> Result<()> {
    let (a, b) = (model.config(), baseline.config());
    if a.mcnn_layers != b.mcnn_layers
        || a.blstm_layers != b.blstm_layers
        || a.blstm_hidden != b.blstm_hidden
    {
        return Err(Error::Config("baseline backbone does not match the model preset".into()));
    }
    model.load_values(baseline.named_values(), &[Section::Backbone])?;
    model.reinit_head(seed ^ 0x7472_616e_7366_6572)
}

/// Greedy transcription of one utterance.
pub fn decode(model: &Model, features: &FeatureMatrix) -> Result<Vec<usize>> {
    let probs = model.predict(&[features])?;
    let p = &probs[0];
    let grid = ProbGrid::new(p.shape()[0], p.shape()[1], p.data().to_vec())?;
    Ok(greedy_decode(&grid))
}

/// Character error rate of greedy decoding over a labelled set.
pub fn evaluate(model: &Model, data: &[Utterance]) -> Result<CerReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("test set"));
    }
    let labels = labels_of(data)?;
    let mut counts = Vec::with_capacity(data.len());
    for (u, l) in data.iter().zip(labels) {
        let hyp = decode(model, &u.features)?;
        counts.push(cer(l, &hyp)?);
    }
    Ok(CerReport::from_counts(counts))
}
