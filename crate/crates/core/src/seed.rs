//! Seed derivation. Every random stream in the crate is keyed by a base seed
//! plus a path of integers, so streams are independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// Stream tags, kept in one place so no two streams collide.
pub mod tag {
    pub const SPEAKER: u64 = 1;
    pub const UTTERANCE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const MIX: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const SEGMENT: u64 = 7;
    pub const TRIALS: u64 = 8;
    pub const BABBLE: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_distinct() {
        assert_ne!(derive(0, &[1, 2]), derive(0, &[2, 1]));
        assert_ne!(derive(0, &[1]), derive(1, &[1]));
        assert_eq!(derive(7, &[3, 4]), derive(7, &[3, 4]));
    }
}
