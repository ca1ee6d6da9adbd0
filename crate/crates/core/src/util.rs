use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stable 64-bit hash of a sequence of byte strings (FNV-1a, separator-aware).
pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p);
        h.write_u8(0xff);
    }
    h.finish()
}

/// Uniform value in [0,1) derived from a stable hash.
pub(crate) fn hash_unit(parts: &[&[u8]]) -> f64 {
    (stable_hash(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic child RNG for a (seed, purpose, index) triple.
pub(crate) fn derived_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let s = stable_hash(&[&seed.to_le_bytes(), purpose.as_bytes(), &index.to_le_bytes()]);
    ChaCha8Rng::seed_from_u64(s)
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}
