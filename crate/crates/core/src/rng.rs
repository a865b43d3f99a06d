//! Seed derivation for independent, reproducible random streams.
//!
//! A stream is identified by a path of integers (master seed, trial index,
//! user index, round tag, ...). Each step mixes through SplitMix64, so
//! streams do not depend on the order in which they are created and the
//! results of a parallel run equal those of a sequential one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in the seed derivation tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedPath(u64);

impl SeedPath {
    pub fn root(master_seed: u64) -> Self {
        SeedPath(splitmix64(master_seed))
    }

    pub fn child(self, index: u64) -> Self {
        SeedPath(splitmix64(
            self.0 ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)),
        ))
    }

    pub fn tagged(self, tag: Round) -> Self {
        self.child(tag as u64 | 0xA5A5_0000_0000_0000)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> StreamRng {
        StreamRng::seed_from_u64(self.0)
    }
}

/// Labels for the distinct random draws a user or analyst makes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Round {
    LeftMessage = 1,
    RightMessage = 2,
    Projection = 3,
    InnerProductNoise = 4,
    ClippedNoise = 5,
    LabelResponse = 6,
    Dataset = 7,
    Bootstrap = 8,
    JlProjection = 9,
}

/// `hash(master_seed, trial_index, user_index, round_tag)`.
pub fn user_stream(trial: SeedPath, user: usize, round: Round) -> StreamRng {
    trial.child(user as u64).tagged(round).rng()
}
