//! Deterministic seed derivation and per-stream generators.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream keyed by a
//! 64-bit seed plus a stream index, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hashes an ordered list of labelled parts into a 64-bit seed.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seed for a named sub-component of a run, e.g. `sub_seed(seed, "emb")`.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    derive_seed(&[&seed.to_string(), label])
}

/// Generator for stream `index` of `seed`. Streams never overlap.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
