//! Deterministic seed derivation. Every random stream in a run is addressed by
//! a base seed plus a path of tags, so streams never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) mod stream {
    pub const BOOTSTRAP: u64 = 1;
    pub const MEMBER_INIT: u64 = 2;
    pub const SOLVER: u64 = 3;
    pub const LATENCY: u64 = 4;
    pub const REPLAY: u64 = 5;
    pub const OFFLINE: u64 = 6;
    pub const TRACE: u64 = 7;
    pub const ENSEMBLE: u64 = 8;
    pub const ROUND: u64 = 9;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}
