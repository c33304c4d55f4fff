//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng` keyed by
//! a base seed, a stream tag, and an index (usually the epoch), so runs are
//! reproducible independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_UI_TRIPLES: u64 = 3;
pub const STREAM_GI_TRIPLES: u64 = 4;
pub const STREAM_COARSE: u64 = 5;
pub const STREAM_FINE: u64 = 6;
pub const STREAM_CONTRAST: u64 = 7;
pub const STREAM_BATCH: u64 = 8;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn stream_rng(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}
