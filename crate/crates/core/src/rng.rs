//! Reproducible random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream whose seed is
//! `splitmix64(splitmix64(splitmix64(global_seed) ^ epoch) ^ index)`, so a run
//! is fully determined by its global seed regardless of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// One step of the SplitMix64 generator, used as a 64-bit mixing function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(global_seed: u64, epoch: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(global_seed) ^ epoch) ^ index)
}

pub fn stream(global_seed: u64, epoch: u64, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(global_seed, epoch, index))
}

/// Domain tags mixed into the global seed so that unrelated consumers never
/// share a stream.
pub mod purpose {
    pub const MASK: u64 = 0x6d61_736b;
    pub const DROPOUT: u64 = 0x6472_6f70;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const INIT: u64 = 0x696e_6974;
    pub const SPLIT: u64 = 0x7370_6c74;
    pub const SELECT: u64 = 0x7365_6c65;
    pub const SYNTH: u64 = 0x7379_6e74;
    pub const HEAD_INIT: u64 = 0x6865_6164;
    pub const HELDOUT_MASK: u64 = 0x686d_736b;
}

/// Stream for `purpose` under `global_seed`.
pub fn tagged(global_seed: u64, purpose: u64, epoch: u64, index: u64) -> StreamRng {
    stream(global_seed ^ splitmix64(purpose), epoch, index)
}
