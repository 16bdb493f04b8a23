//! Derivation of independent RNG streams from a root seed.
//!
//! Every random draw in training comes from a stream keyed by
//! `(root seed, purpose, epoch, index)`, so evaluation order never changes
//! the numbers drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PURPOSE_SHUFFLE: u64 = 1;
pub const PURPOSE_AUGMENT: u64 = 2;
pub const PURPOSE_DROPOUT: u64 = 3;
pub const PURPOSE_BACKBONE: u64 = 4;
pub const PURPOSE_HEAD: u64 = 5;
pub const PURPOSE_SYNTH_TRAIN: u64 = 6;
pub const PURPOSE_SYNTH_VAL: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(root: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, parts))
}
