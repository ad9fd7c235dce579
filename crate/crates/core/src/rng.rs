//! Deterministic RNG stream derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream whose seed is
//! `sha256(root_seed_le || label)`. Streams are therefore independent of each
//! other and of the order in which they are created, so resuming a run from a
//! checkpoint only needs the root seed and the labels, never serialized
//! generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// RNG stream for `label` under `root_seed`.
///
/// Labels are hierarchical by convention, e.g. `"synth/scene/17"` or
/// `"train/epoch/3/shuffle"`. Equal `(root_seed, label)` always yields an
/// identical stream.
pub fn stream(root_seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}
