//! Seeded randomness. Every stochastic choice in the crate derives its stream
//! from an explicit seed so that runs are bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a list of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn derived(base: u64, tags: &[u64]) -> Rng {
    seeded(derive_seed(base, tags))
}

/// Stable 64-bit tag for a string (used to key streams by names).
pub fn str_tag(s: &str) -> u64 {
    let out = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
