//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 keystream whose key is derived
//! from a root seed and a path of integer tags, so independent consumers (a chain,
//! a study cell, the count simulator) never share state and can be replayed in
//! isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Tags that name the consumer of a stream.
pub mod tags {
    pub const TRUE_PARAMS: u64 = 0x7472_7565;
    pub const COUNTS: u64 = 0x636f_756e;
    pub const CHAIN: u64 = 0x6368_6169;
    pub const INIT: u64 = 0x696e_6974;
    pub const STUDY_CELL: u64 = 0x6365_6c6c;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically derive a child seed from `seed` and a tag path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &tag in path {
        state ^= tag.wrapping_mul(0xD6E8_FEB8_6659_FD93).rotate_left(17) ^ out;
        out = splitmix64(&mut state);
    }
    out
}

/// A fresh stream keyed by `seed` and `path`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut state = derive_seed(seed, path);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
