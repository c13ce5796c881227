//! Deterministic RNG stream derivation.
//!
//! Every randomized step in the pipeline draws from its own stream derived
//! from `(seed, purpose, indices...)`. Streams are independent of each other
//! and of execution order, so parallel and serial runs agree and adding a
//! consumer in one place never shifts draws elsewhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. The discriminant is mixed into the stream key, so two
/// purposes with the same indices never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    MlmMask = 3,
    PairSample = 4,
    Dropout = 5,
    ClickSample = 6,
    Synth = 7,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from a base seed, a purpose tag,
/// and positional indices (epoch, entry index, ...).
pub fn derive_rng(seed: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ (stream as u64).wrapping_mul(0xA24B_AED4_963E_E407);
    for &ix in indices {
        let mixed = splitmix64(&mut state);
        state ^= ix.wrapping_mul(0x9FB2_1C65_1E98_DF25) ^ mixed;
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
