//! Hierarchical deterministic randomness.
//!
//! Every random draw in the pipeline comes from a generator derived from
//! `(master_seed, stage_label, item_key)` through a keyed hash. A stage can
//! therefore be resumed, reordered, or parallelized without shifting any
//! other stage's stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const DOMAIN: &[u8] = b"selfloop.rng.v1";

/// Derives a deterministic generator for one (stage, item) pair.
///
/// The same triple always yields an identical stream; any change to the
/// seed, stage label, or item key produces an unrelated stream.
pub fn derive_rng(master_seed: u64, stage_label: &str, item_key: &str) -> ChaCha8Rng {
    assert!(!stage_label.is_empty(), "stage label must be non-empty");
    assert!(!item_key.is_empty(), "item key must be non-empty");
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(master_seed.to_le_bytes());
    h.update((stage_label.len() as u64).to_le_bytes());
    h.update(stage_label.as_bytes());
    h.update((item_key.len() as u64).to_le_bytes());
    h.update(item_key.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Hash of arbitrary bytes onto the unit interval, independent of any RNG
/// stream position. Used where a decision must be a pure function of its
/// inputs (e.g. the mock backend's per-question fidelity draw).
pub fn unit_hash(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    h.update(b"selfloop.unit.v1");
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&digest[..8]);
    // top 53 bits -> [0, 1)
    (u64::from_le_bytes(buf) >> 11) as f64 / (1u64 << 53) as f64
}
