//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent child seed from `seed` and a stream key.
pub fn mix(seed: u64, key: u64) -> u64 {
    splitmix(splitmix(seed) ^ key.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Fold several keys into one seed.
pub fn mix_all(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(seed, |s, k| mix(s, *k))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
