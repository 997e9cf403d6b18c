//! Seeded random streams.
//!
//! Every replication owns a ChaCha8 stream whose seed is a 64-bit avalanche
//! mix of `(master_seed, rep_index)`. Sub-streams (regret oracle, inference,
//! individual rejection attempts) are derived the same way from the
//! replication seed and a fixed tag, so changing one consumer never shifts
//! the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Tags for sub-streams derived from a replication seed.
pub mod tag {
    pub const SIMULATION: u64 = 0x5349_4d55;
    pub const REGRET: u64 = 0x5245_4752;
    pub const INFERENCE: u64 = 0x494e_4645;
    pub const CALIBRATION: u64 = 0x4341_4c49;
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(master ^ splitmix64(index))`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, tag: u64) -> Stream {
    stream(derive_seed(seed, tag))
}
