use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("label of length {label_len} needs at least {required} frames, got {frames}")]
    InfeasibleAlignment {
        label_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("waveform of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },

    #[error("speed factor {0} outside the supported range [0.5, 2.0]")]
    FactorOutOfRange(f64),

    #[error("grapheme {0:?} (U+{1:04X}) is not in the vocabulary")]
    UnknownGrapheme(char, u32),

    #[error("transcript is empty after whitespace stripping")]
    EmptyTranscript,

    #[error("no labeled entries to build a vocabulary from")]
    NoLabeledEntries,

    #[error("reference sequence is empty")]
    EmptyReference,

    #[error("audio path {0:?} appears in both the base and the new corpus")]
    PathCollision(String),

    #[error("enumeration of {0} alignments exceeds the brute-force limit")]
    TooLarge(u64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("parameter {0:?} not found")]
    MissingParameter(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
