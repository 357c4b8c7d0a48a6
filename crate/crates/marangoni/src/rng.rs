//! Deterministic random streams.
//!
//! Every stochastic site in the engine (particle seeding, per-element surface
//! sampling) draws from its own ChaCha8 stream keyed by the scene seed plus a
//! small list of tags (purpose, step index, cell/element index). Streams are
//! independent of iteration order and thread count, so reruns with the same
//! seed are bitwise identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Keep these distinct so different uses of the same
/// (seed, index) pair never alias.
pub const STREAM_SEEDING: u64 = 0x5eed;
pub const STREAM_SAMPLING: u64 = 0x5a3b;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Counter-based stream: mixes `seed` and `tags` into a 256-bit ChaCha key.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x243f6a8885a308d3);
    let mut key = [0u8; 32];
    let mut word = 0usize;
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    let mut z = state;
    while word < 4 {
        z = splitmix64(z);
        key[word * 8..word * 8 + 8].copy_from_slice(&z.to_le_bytes());
        word += 1;
    }
    ChaCha8Rng::from_seed(key)
}
