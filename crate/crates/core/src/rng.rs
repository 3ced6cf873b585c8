//! Keyed random streams.
//!
//! Every consumer of randomness asks for a stream keyed by `(seed, tag)`.
//! Streams are ChaCha8 instances whose key is the SHA-256 of the seed and the
//! tag, so independent purposes never share state and the same key always
//! replays the same sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

fn key(seed: u64, tag: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

pub fn stream(seed: u64, tag: &str) -> Stream {
    ChaCha8Rng::from_seed(key(seed, tag))
}

/// A child seed for `tag`, used when a sub-component needs its own integer seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let k = key(seed, tag);
    u64::from_le_bytes(k[..8].try_into().expect("8 bytes"))
}
