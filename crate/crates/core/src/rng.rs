//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream derived from a
//! master seed plus a purpose label and index. Streams are stable across
//! platforms, and their positions can be captured and restored for bit-exact
//! training resume.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a 32-byte ChaCha seed from (master seed, purpose, index) with an
/// FNV-1a style mix. Distinct labels give independent streams.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> [u8; 32] {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for b in master.to_le_bytes() {
        mix(b);
    }
    for b in purpose.as_bytes() {
        mix(*b);
    }
    for b in index.to_le_bytes() {
        mix(b);
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.chunks_mut(8).enumerate() {
        let mut x = h ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15);
        // splitmix64 finalizer
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^= x >> 31;
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    seed
}

/// A ChaCha8 stream for (master, purpose, index).
pub fn stream(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, purpose, index))
}

/// Restore a stream to a previously captured word position.
pub fn stream_at(master: u64, purpose: &str, index: u64, word_pos: u128) -> ChaCha8Rng {
    let mut rng = stream(master, purpose, index);
    rng.set_word_pos(word_pos);
    rng
}
