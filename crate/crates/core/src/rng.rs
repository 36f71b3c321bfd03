//! Hierarchical deterministic seeding.
//!
//! Every random stream is keyed by a path such as
//! `[experiment seed] → client id → round`, so streams are independent of the
//! order in which they are created and of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of labels into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Stable 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed-path labels, so call sites read as names rather than magic numbers.
pub mod stream {
    pub const ENCODER: u64 = 1;
    pub const DECODER: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SHARD: u64 = 4;
    pub const LOCAL: u64 = 5;
    pub const FINETUNE: u64 = 6;
    pub const INJECT: u64 = 7;
    pub const FOUNDATION: u64 = 8;
    pub const SAMPLE: u64 = 9;
    pub const RECIPE: u64 = 10;
}
