//! Seed derivation. Every random stream in the simulator is keyed by the run
//! seed plus a tuple of tags, so streams are independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string (FNV-1a).
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

// Stream tags.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_SAMPLE: u64 = 2;
pub(crate) const TAG_SHUFFLE: u64 = 3;
pub(crate) const TAG_SPLIT: u64 = 4;
pub(crate) const TAG_NOISE: u64 = 5;
pub(crate) const TAG_DATA: u64 = 6;
pub(crate) const TAG_MIXER: u64 = 7;
