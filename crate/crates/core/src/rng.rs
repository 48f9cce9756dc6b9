//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha8 stream derived from a run seed
//! and a fixed stream id, so adding draws in one component never shifts the
//! numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod stream {
    pub const TOWER: u64 = 1;
    pub const FORCE: u64 = 2;
    pub const MASKS: u64 = 3;
    pub const TRACKING: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const FAILURES: u64 = 6;
    pub const PUSH: u64 = 7;
    pub const SCENE: u64 = 8;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a run seed with a sub-index (attempt number, block id, ...) into a new seed.
pub fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
