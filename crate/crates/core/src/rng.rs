//! Seeded, portable randomness.
//!
//! Every random stream is a ChaCha8 generator keyed by the run seed and a
//! stream index, so draws are identical across platforms and independent of
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `seed` on stream `stream`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator keyed by `seed` and an ordered list of tags, e.g.
/// `(purpose, epoch, sequence)`.
pub fn derive(seed: u64, tags: &[u64]) -> Rng {
    let key = tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Stream tags for distinct consumers of one run seed.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const HOLDOUT: u64 = 4;
    pub const NEGATIVE: u64 = 5;
    pub const TOKEN_DROP: u64 = 6;
    pub const REVEAL: u64 = 7;
    pub const CUT: u64 = 8;
}
