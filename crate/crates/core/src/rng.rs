//! Seed derivation. Every stochastic component draws from its own
//! ChaCha stream keyed by `(base seed, tags...)`, so results never depend on
//! scheduling or on how many other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base` to obtain an independent child seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, tags: &[u64]) -> Rng {
    rng_from(derive_seed(base, tags))
}

/// Stream tags, kept in one place so distinct components never collide.
pub mod tags {
    pub const MEMBERSHIP: u64 = 1;
    pub const DATA: u64 = 2;
    pub const CANARY: u64 = 3;
    pub const MODEL: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const TEACHER: u64 = 9;
    pub const STUDENT: u64 = 10;
    pub const EXCLUSION: u64 = 11;
    pub const ENCODER: u64 = 12;
    pub const HEAD: u64 = 13;
    pub const QUERY: u64 = 14;
    pub const MASK: u64 = 15;
    pub const HOLDOUT: u64 = 16;
    pub const NAME_SHAME: u64 = 17;
    pub const SIMILARITY: u64 = 18;
}
