//! Counter-based seed derivation so per-sample randomness depends only on
//! `(global seed, stream tag, indices)` and never on processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const CMZ: u64 = 3;
    pub const BACKGROUND: u64 = 4;
    pub const LESION: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const INIT: u64 = 7;
    pub const HEAD: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(parts))
}
