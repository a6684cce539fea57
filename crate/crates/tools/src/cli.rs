//! The `asr` command line.

use std::path::{Path, PathBuf};

use asr_core::audio::VadConfig;
use asr_core::corpus::{
    build_joint_corpus, build_vocab_from_entries, SynthSpec, DEFAULT_AUGMENT_FRACTION, DEFAULT_FACTORS,
};
use asr_core::features::{mfcc, MfccConfig};
use asr_core::model::{Model, Section};
use asr_core::train::{
    pretrain, split_validation, train_supervised, transfer, Control, EpochReport, TrainMode, TrainOutcome,
    TrainingConfig, Utterance,
};
use clap::{Parser, Subcommand};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Result, ToolError};
use crate::featcache;
use crate::manifest::{read_manifest, read_vocab, write_manifest, write_vocab, Manifest};
use crate::pipeline::{load_audio, load_manifest_utterances, load_utterances, rebase, segment_to_dir, synth_to_dir};
use crate::report::score;
use crate::wav::read_wav;

/// Output size of the placeholder head carried by pretraining checkpoints.
pub const PRETRAIN_VOCAB: usize = 2;

#[derive(Debug, Parser)]
#[command(name = "asr", version, about = "Small-sample speech recognition: pretraining, transfer and CTC training")]
pub struct Cli {
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training config (JSON, TrainingConfig field names).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a long recording into utterances by energy VAD.
    Segment {
        input: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        min_s: f64,
        #[arg(long, default_value_t = 10.0)]
        max_s: f64,
        /// Gate as a fraction of the loudest frame's energy.
        #[arg(long, default_value_t = 0.02)]
        threshold: f64,
    },
    /// Write an MFCC cache file per manifest entry.
    Features {
        manifest: PathBuf,
        /// Store per-utterance normalized features.
        #[arg(long)]
        normalize: bool,
    },
    /// Build the joint corpus of base, new and speed-perturbed new data.
    Augment {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        new: PathBuf,
        #[arg(long, default_value_t = DEFAULT_AUGMENT_FRACTION)]
        fraction: f64,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FACTORS)]
        factors: Vec<f64>,
    },
    /// Collect the grapheme vocabulary of one or more manifests.
    Vocab {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Masked denoising pretraining of the backbone.
    Pretrain {
        manifest: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Supervised CTC training.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint whose backbone (and head, when compatible) seeds the model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Transfer a baseline model onto new data with a frozen-backbone phase.
    Transfer {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        new: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_AUGMENT_FRACTION)]
        fraction: f64,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FACTORS)]
        factors: Vec<f64>,
    },
    /// Greedy transcription of a manifest or a single WAV file.
    Decode {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Character error rate report on a labelled manifest.
    Evaluate {
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Write a synthetic tone corpus with transcripts.
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// JSON file with synthetic corpus parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

impl Cli {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| ToolError::Usage("--out is required for this command".into()))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Segment {
            input,
            min_s,
            max_s,
            threshold,
        } => {
            let dir = cli.out()?;
            create_dir(dir)?;
            let cfg = VadConfig {
                min_s: *min_s,
                max_s: *max_s,
                energy_threshold: *threshold,
                ..VadConfig::default()
            };
            let entries = segment_to_dir(&read_wav(input)?, &cfg, dir)?;
            log::info!("{} segments", entries.len());
            write_manifest(&dir.join("manifest.jsonl"), &entries)
        }
        Command::Features { manifest, normalize } => {
            let dir = cli.out()?;
            create_dir(dir)?;
            let m = read_manifest(manifest)?;
            for e in &m.entries {
                let f = mfcc(&load_audio(&m.root, e)?, &MfccConfig::default())?;
                let f = if *normalize { f.normalized() } else { f };
                featcache::write(&dir.join(cache_name(&e.audio)), &f)?;
            }
            Ok(())
        }
        Command::Augment {
            base,
            new,
            fraction,
            factors,
        } => {
            let out = cli.out()?;
            let root = parent_dir(out);
            let (b, n) = (read_manifest(base)?, read_manifest(new)?);
            let joint = build_joint_corpus(&rebase(&b, &root), &rebase(&n, &root), *fraction, factors, seed(cli)?)?;
            write_manifest(out, &joint.entries)?;
            print_json(&joint.report)
        }
        Command::Vocab { manifests } => {
            let mut entries = Vec::new();
            for p in manifests {
                entries.extend(read_manifest(p)?.entries);
            }
            write_vocab(cli.out()?, &build_vocab_from_entries(&entries)?)
        }
        Command::Pretrain { manifest, val, init } => {
            let out = cli.out()?;
            let cfg = training_config(TrainMode::Pretrain, cli)?;
            let (train, val) = split(&cfg, read_manifest(manifest)?, val.as_deref(), None)?;
            let mut model = Model::new(cfg.preset.config(PRETRAIN_VOCAB), cfg.seed)?;
            if !model.has_decoder() {
                return Err(ToolError::Usage("pretraining needs a model with the DAE decoder".into()));
            }
            if let Some(p) = init {
                let c = load_compatible(p, &model)?;
                let mut sections = vec![Section::Backbone];
                if c.has(Section::Decoder) {
                    sections.push(Section::Decoder);
                }
                model.load_values(c.model.named_values(), &sections)?;
            }
            let outcome = pretrain(&cfg, &mut model, &train, &val, log_epoch)?;
            checkpoint::save(out, &model, &[Section::Backbone, Section::Decoder])?;
            print_json(&outcome_summary(&outcome))
        }
        Command::Train {
            manifest,
            vocab,
            val,
            init,
        } => {
            let out = cli.out()?;
            let cfg = training_config(TrainMode::Supervised, cli)?;
            let vocab = read_vocab(vocab)?;
            let (train, val) = split(&cfg, read_manifest(manifest)?, val.as_deref(), Some(&vocab))?;
            let mut model = Model::new(cfg.preset.config(vocab.len()), cfg.seed)?;
            if let Some(p) = init {
                let c = load_compatible(p, &model)?;
                let mut sections = vec![Section::Backbone];
                if c.has(Section::Head) && c.header.config.vocab_size == vocab.len() {
                    sections.push(Section::Head);
                }
                model.load_values(c.model.named_values(), &sections)?;
            }
            let outcome = train_supervised(&cfg, &mut model, &train, &val, log_epoch)?;
            checkpoint::save(out, &model, &[Section::Backbone, Section::Head])?;
            print_json(&outcome_summary(&outcome))
        }
        Command::Transfer {
            base,
            new,
            baseline,
            vocab,
            val,
            fraction,
            factors,
        } => {
            let out = cli.out()?;
            let cfg = training_config(TrainMode::Transfer, cli)?;
            let vocab = read_vocab(vocab)?;
            let root = std::env::current_dir().map_err(|e| ToolError::io(".", e))?;
            let (b, n) = (read_manifest(base)?, read_manifest(new)?);
            let joint = build_joint_corpus(&rebase(&b, &root), &rebase(&n, &root), *fraction, factors, cfg.seed)?;
            log::info!(
                "joint corpus: {} entries, {:.4} h",
                joint.report.entries,
                joint.report.total_hours
            );
            let joint = Manifest {
                entries: joint.entries,
                root,
            };
            let (train, val) = split(&cfg, joint, val.as_deref(), Some(&vocab))?;
            let baseline = checkpoint::load(baseline)?;
            if !baseline.has(Section::Backbone) {
                return Err(ToolError::Usage("baseline checkpoint has no backbone".into()));
            }
            let mut model = Model::new(cfg.preset.config(vocab.len()), cfg.seed)?;
            let outcome = transfer(&cfg, &mut model, &baseline.model, &train, &val, log_epoch)?;
            checkpoint::save(out, &model, &[Section::Backbone, Section::Head])?;
            print_json(&outcome_summary(&outcome))
        }
        Command::Decode {
            input,
            checkpoint,
            vocab,
        } => {
            let (c, vocab) = recognizer(checkpoint, vocab)?;
            let (ids, utts) = if input.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                let w = read_wav(input)?;
                let u = Utterance {
                    id: input.to_string_lossy().into_owned(),
                    duration_s: w.duration_s(),
                    features: crate::pipeline::features_of(&w)?,
                    label: None,
                };
                (vec![u.id.clone()], vec![u])
            } else {
                let m = read_manifest(input)?;
                (m.entries.iter().map(|e| e.audio.clone()).collect(), load_manifest_utterances(&m, None)?)
            };
            let mut text = String::new();
            for (id, u) in ids.iter().zip(&utts) {
                let hyp = asr_core::train::decode(&c.model, &u.features)?;
                let line = serde_json::json!({ "audio": id, "text": vocab.decode(&hyp) });
                text.push_str(&line.to_string());
                text.push('\n');
            }
            emit(cli.out.as_deref(), &text)
        }
        Command::Evaluate {
            manifest,
            checkpoint,
            vocab,
        } => {
            let (c, vocab) = recognizer(checkpoint, vocab)?;
            let m = read_manifest(manifest)?;
            let report = score(&c.model, &vocab, &load_manifest_utterances(&m, Some(&vocab))?)?;
            log::info!("CER {:.4} over {} utterances", report.cer, report.per_utt.len());
            let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
            text.push('\n');
            emit(cli.out.as_deref(), &text)
        }
        Command::Synth { count, spec } => {
            let dir = cli.out()?;
            create_dir(dir)?;
            let mut s: SynthSpec = match spec {
                Some(p) => read_json(p)?,
                None => SynthSpec::default(),
            };
            s.utterances = *count;
            let entries = synth_to_dir(&s, seed(cli)?, dir)?;
            write_manifest(&dir.join("manifest.jsonl"), &entries)
        }
    }
}

fn seed(cli: &Cli) -> Result<u64> {
    match (cli.seed, &cli.config) {
        (Some(s), _) => Ok(s),
        (None, Some(p)) => {
            let v: serde_json::Value = read_json(p)?;
            Ok(v.get("seed").and_then(serde_json::Value::as_u64).unwrap_or(0))
        }
        (None, None) => Ok(0),
    }
}

/// Defaults of `mode`, overlaid with the keys of `--config`, then `--seed`.
pub fn training_config(mode: TrainMode, cli: &Cli) -> Result<TrainingConfig> {
    let mut base = serde_json::to_value(TrainingConfig::for_mode(mode)).expect("config serializes");
    if let Some(p) = &cli.config {
        let over: serde_json::Value = read_json(p)?;
        let over = over
            .as_object()
            .ok_or_else(|| ToolError::format(p, "config must be a JSON object"))?;
        let fields = base.as_object_mut().expect("config is an object");
        for (k, v) in over {
            if !fields.contains_key(k) {
                return Err(ToolError::format(p, format!("unknown config key {k:?}")));
            }
            fields.insert(k.clone(), v.clone());
        }
    }
    let mut cfg: TrainingConfig = serde_json::from_value(base).map_err(|e| {
        ToolError::format(cli.config.clone().unwrap_or_default(), e.to_string())
    })?;
    if cfg.mode != mode {
        return Err(ToolError::Usage(format!(
            "config mode {:?} does not match the {:?} command",
            cfg.mode, mode
        )));
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training and validation utterances: an explicit validation manifest, or
/// a seeded hold-out of `validation_fraction` of the training entries.
fn split(
    cfg: &TrainingConfig,
    m: Manifest,
    val: Option<&Path>,
    vocab: Option<&asr_core::corpus::Vocabulary>,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    if m.entries.is_empty() {
        return Err(asr_core::Error::EmptyDataset("training manifest").into());
    }
    if let Some(p) = val {
        let v = read_manifest(p)?;
        return Ok((load_manifest_utterances(&m, vocab)?, load_manifest_utterances(&v, vocab)?));
    }
    let (tr, va) = split_validation(m.entries.len(), cfg.validation_fraction, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| m.entries[i].clone()).collect::<Vec<_>>();
    Ok((
        load_utterances(&m.root, &pick(&tr), vocab)?,
        load_utterances(&m.root, &pick(&va), vocab)?,
    ))
}

fn load_compatible(path: &Path, model: &Model) -> Result<Checkpoint> {
    let c = checkpoint::load(path)?;
    let (a, b) = (&c.header.config, model.config());
    if a.mcnn_layers != b.mcnn_layers || a.blstm_layers != b.blstm_layers || a.blstm_hidden != b.blstm_hidden {
        return Err(ToolError::format(path, "checkpoint backbone does not match the model preset"));
    }
    Ok(c)
}

fn recognizer(checkpoint: &Path, vocab_path: &Path) -> Result<(Checkpoint, asr_core::corpus::Vocabulary)> {
    let c = checkpoint::load(checkpoint)?;
    let vocab = read_vocab(vocab_path)?;
    if !c.has(Section::Head) {
        return Err(ToolError::Usage(format!(
            "{} has no prediction layer; train or transfer it first",
            checkpoint.display()
        )));
    }
    if c.header.config.vocab_size != vocab.len() {
        return Err(ToolError::format(
            vocab_path,
            format!(
                "vocabulary has {} symbols, checkpoint expects {}",
                vocab.len(),
                c.header.config.vocab_size
            ),
        ));
    }
    Ok((c, vocab))
}

fn log_epoch(_: &Model, r: &EpochReport) -> asr_core::Result<Control> {
    log::info!(
        "epoch {:>3}  train {:.6}  val {}  steps {}  skipped {}{}",
        r.epoch,
        r.train_loss,
        r.val_loss.map_or("-".into(), |v| format!("{v:.6}")),
        r.steps,
        r.skipped,
        if r.backbone_frozen { "  (backbone frozen)" } else { "" }
    );
    Ok(Control::Continue)
}

fn outcome_summary(o: &TrainOutcome) -> serde_json::Value {
    serde_json::json!({
        "epochs": o.history.len(),
        "best_epoch": o.best_epoch,
        "stopped_early": o.stopped_early,
        "initial_val_loss": o.initial_val_loss,
        "final_train_loss": o.history.last().map(|r| r.train_loss),
    })
}

fn cache_name(audio: &str) -> String {
    let stem: String = audio
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{stem}.mfcc")
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ToolError::io(dir, e))
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let text = std::fs::read_to_string(p).map_err(|e| ToolError::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| ToolError::format(p, e.to_string()))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v).expect("value serializes"));
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| ToolError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
