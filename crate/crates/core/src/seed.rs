//! Counter-based seed derivation.
//!
//! A child seed is the first 8 bytes (little endian) of
//! `SHA-256(le64(master) || le64(path[0]) || le64(path[1]) || ...)`, so every
//! consumer gets an independent stream regardless of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Stream labels for the top-level consumers of the run seed.
pub mod stream {
    pub const SYNTHETIC: u64 = 1;
    pub const TUNING: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
    pub const PRIOR_CV: u64 = 4;
}
