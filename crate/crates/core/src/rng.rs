//! Counter-derived random streams.
//!
//! Every random draw in the crate comes from a [`SeedStream`] that is derived
//! from the run seed by a chain of integer tags (step, sequence index, purpose).
//! Deriving instead of threading one mutable generator keeps batch-parallel
//! work and resumed runs bit-identical to a straight single-threaded run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix64(seed) }
    }

    /// Child stream identified by `tag`. Distinct tags give independent streams.
    pub fn fork(&self, tag: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019))),
        }
    }

    pub fn rng(&self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

/// Purpose tags so unrelated consumers never share a stream.
pub mod tags {
    pub const DISCRETE: u64 = 1;
    pub const GAUSSIAN: u64 = 2;
    pub const REPR_MASK: u64 = 3;
    pub const TIMES: u64 = 4;
    pub const CFG_DROP: u64 = 5;
    pub const DATA: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SAMPLER: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const CODEBOOK: u64 = 10;
    pub const P_R: u64 = 11;
    pub const TRAIN: u64 = 12;
    pub const NGRAM: u64 = 13;
}
