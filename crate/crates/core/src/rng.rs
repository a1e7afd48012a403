//! Splittable deterministic randomness.
//!
//! Every consumer of randomness derives its own stream from
//! `(global_seed, purpose_tag, index)` through a SHA-256 keyed construction.
//! There is no global generator and no time-based seeding, so any stage can
//! be re-run in isolation and parallel workers never contend for state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Deterministic stream for one `(seed, purpose, index)` triple.
///
/// Distinct triples yield statistically independent streams; equal triples
/// yield bit-identical ones.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0x1f]);
    h.update(purpose.as_bytes());
    h.update([0x1f]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derived sub-seed, for handing a child component its own `u64` root.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    stream(seed, purpose, index).gen()
}

/// Standard-normal draws, always sampled at `f64` so `f32` instantiations of
/// the kernel observe the same underlying sequence.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
