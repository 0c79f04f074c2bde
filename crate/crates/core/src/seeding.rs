//! Deterministic RNG stream derivation.
//!
//! Every randomized stage owns a ChaCha8 stream derived from
//! `(global seed, domain label, index)`, so workers and resumed runs
//! reproduce the exact same draws regardless of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::stablehash::StableHasher;

/// Derive an independent RNG stream from a global seed, a domain label
/// and a stream index (worker id, batch id, piece id, ...).
pub fn derive_rng(global_seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut h = StableHasher::new(global_seed);
    h.write(domain.as_bytes());
    h.write_u64(index);
    ChaCha8Rng::seed_from_u64(h.finish())
}
