//! Deterministic per-entity RNG streams.
//!
//! Every consumer of randomness (data synthesis, modality assignment, each
//! device's training loop, the server, the shared backbone initializer)
//! gets its own stream derived from the master seed by a stable hash of
//! `(seed, role, id)`. Because no stream is shared across entities, the
//! order in which devices are scheduled cannot change what any of them
//! draws, which is what makes parallel and sequential runs bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream role tags. Using fixed strings (not enum discriminants) keeps the
/// derivation stable across refactors.
pub mod roles {
    pub const DATA: &str = "data";
    pub const ASSIGN: &str = "assign";
    /// Shared frozen SLM backbone + its adapter init; same stream for every
    /// device and the server copy, mirroring a shared pretrained checkpoint.
    pub const BACKBONE_SLM: &str = "backbone-slm";
    pub const BACKBONE_LLM: &str = "backbone-llm";
    pub const DEVICE_MODEL: &str = "device-model";
    pub const SERVER_MODEL: &str = "server-model";
    pub const DEVICE_TRAIN: &str = "device-train";
    pub const SERVER_TRAIN: &str = "server-train";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of the `(role, id)` stream under `master`.
pub fn stream_seed(master: u64, role: &str, id: u64) -> u64 {
    let mixed = master ^ fnv1a(role.as_bytes()).rotate_left(17) ^ id.wrapping_mul(0xa076_1d64_78bd_642f);
    splitmix64(splitmix64(mixed))
}

/// A seeded ChaCha8 stream for `(role, id)`.
pub fn stream_rng(master: u64, role: &str, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, role, id))
}
