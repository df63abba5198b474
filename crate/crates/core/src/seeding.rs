//! Deterministic RNG stream derivation. Every random draw in the crate
//! comes from a ChaCha8 stream keyed by (seed, purpose tag, indices...),
//! so reruns and resumed runs replay the exact same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags, one per independent stream family.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const WINDOW: u64 = 3;
    pub const PRIOR: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const SAMPLE: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const CORRUPT: u64 = 9;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds the parts into a single well-mixed 64-bit value.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x243f_6a88_85a3_08d3;
    let mut acc: u64 = parts.len() as u64;
    for &p in parts {
        state ^= p;
        acc ^= splitmix64(&mut state);
    }
    state ^= acc;
    splitmix64(&mut state)
}

/// Stream for the given key parts.
pub fn derive_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
