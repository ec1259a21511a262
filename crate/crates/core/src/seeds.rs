//! Seed expansion.
//!
//! Every random draw in a run derives from one `u64` seed. Each consumer owns a
//! ChaCha8 generator seeded with that value and switched to its own stream
//! number, so adding draws to one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream numbers handed to [`rng`]. Values are part of the on-disk
/// reproducibility contract and must not be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Mixing = 1,
    ChannelNoise = 2,
    ImageNoise = 3,
    CalibrationPoses = 4,
    CalibrationSplit = 5,
    ModelInit = 6,
    TrainingShuffle = 7,
    GradCheck = 8,
    DetectionBalance = 9,
    DetectionSplit = 10,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// Derives a child seed, for example one per protocol run of a batch.
pub fn child(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
