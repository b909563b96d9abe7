//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes an ordered list of integers into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_0f_9c0_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stable 64-bit hash of a string, for seeding by image id.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// Stream tags keep independent consumers of one run seed apart.
pub mod stream {
    pub const STUDENT_INIT: u64 = 1;
    pub const BACKBONE: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const IMAGE: u64 = 4;
    pub const SCENE: u64 = 5;
}
