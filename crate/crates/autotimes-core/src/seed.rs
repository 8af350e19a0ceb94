//! Deterministic seed derivation. Every random stream in the workspace is
//! keyed by a root seed plus a text label, so reruns with the same seed
//! reproduce byte-identical artifacts.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Derives a child seed from `(root, label)` by hashing.
pub fn derive(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn rng(root: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(root, label))
}

/// Fills a buffer with N(0, std^2) draws from a labeled stream.
pub fn gaussian(root: u64, label: &str, std: f64, len: usize) -> Vec<f64> {
    let mut r = rng(root, label);
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    (0..len).map(|_| normal.sample(&mut r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_label_sensitive() {
        assert_eq!(derive(7, "a"), derive(7, "a"));
        assert_ne!(derive(7, "a"), derive(7, "b"));
        assert_ne!(derive(7, "a"), derive(8, "a"));
    }

    #[test]
    fn gaussian_reproduces() {
        let a = gaussian(42, "w", 0.02, 16);
        let b = gaussian(42, "w", 0.02, 16);
        assert_eq!(a, b);
    }
}
