//! Deterministic, decorrelated random streams.
//!
//! Every random decision in the toolkit draws from a ChaCha stream whose key
//! is derived from the global seed plus a stream label and integer context
//! (query id hash, bootstrap index, epoch, ...). Streams are independent of
//! iteration order, so per-list work can run in parallel and still merge
//! deterministically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels; one per independent source of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Simulation,
    ParamInit,
    Dropout,
    Shuffle,
    Synth,
    GradCheck,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Simulation => 0x51,
            Stream::ParamInit => 0x52,
            Stream::Dropout => 0x53,
            Stream::Shuffle => 0x54,
            Stream::Synth => 0x55,
            Stream::GradCheck => 0x56,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// ChaCha stream keyed on (seed, stream, context words).
pub fn stream_rng(seed: u64, stream: Stream, context: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ splitmix64(stream.tag()));
    for &word in context {
        state = splitmix64(state ^ splitmix64(word));
    }
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
