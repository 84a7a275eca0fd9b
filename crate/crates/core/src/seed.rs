//! Seed derivation. Every random stream in the crate is keyed by
//! `(base seed, stream id)` so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

pub fn rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, stream))
}

/// Stream tags, so unrelated consumers of the same base seed never collide.
pub mod stream {
    pub const INIT: u64 = 0x1000_0000;
    pub const TRAIN_STEP: u64 = 0x2000_0000;
    pub const VALIDATION: u64 = 0x3000_0000;
    pub const GALLERY: u64 = 0x4000_0000;
    pub const PERSONALIZE: u64 = 0x5000_0000;
    pub const COMPOSE: u64 = 0x6000_0000;
    pub const SAMPLE: u64 = 0x7000_0000;
}
