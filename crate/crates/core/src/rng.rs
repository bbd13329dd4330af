//! Deterministic RNG stream derivation.
//!
//! Every stochastic component (parameter init, sampler, augmentation,
//! stochastic depth) draws from its own ChaCha stream derived from the
//! experiment seed, a domain label and an index. Streams are independent
//! of each other, so adding draws to one component never perturbs another,
//! and per-(step, item) derivation keeps runs bit-reproducible even when
//! batch items are processed in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic stream for `(seed, domain, a, b)`.
pub fn derive_rng(seed: u64, domain: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let h = fnv1a(domain.as_bytes());
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&h.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Uniform draw in `[lo, hi)` performed in f64.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Truncated normal draw (mean 0, given std, rejected outside ±2 std).
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
