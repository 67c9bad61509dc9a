//! Seeded random streams.
//!
//! Every consumer derives its generator from `(seed, stream)` so parallel
//! work units draw from independent, reproducible sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate. Keeping them in one place avoids two
/// subsystems accidentally sharing a sequence.
pub mod streams {
    pub const HEAD_RANDOM_ROWS: u64 = 1;
    pub const HEAD_ORIGINAL: u64 = 2;
    pub const ENCODER: u64 = 3;
    pub const DECOMPOSE: u64 = 16;
    pub const RECON: u64 = 17;
    pub const SYNTH: u64 = 32;
    pub const ATTACK_INIT: u64 = 1 << 20;
}
