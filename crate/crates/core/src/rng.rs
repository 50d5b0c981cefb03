//! Seeded randomness with one independent stream per name.
//!
//! Every tensor initialization draws from a stream keyed by the tensor's
//! registry name, so removing one module (e.g. an ablation) never shifts
//! the draws seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Root of all randomness in a run. Cheap to clone for snapshotting.
#[derive(Debug, Clone)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Deterministic generator for a named stream.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    /// Gaussian draws from the named stream, always sampled in f64 so that
    /// 32- and 64-bit runs share initializations up to rounding.
    pub fn normal_f64(&self, name: &str, n: usize, std_dev: f64) -> Vec<f64> {
        let mut rng = self.stream(name);
        let dist = Normal::new(0.0, std_dev).expect("valid std dev");
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    /// Uniform u32 draws below `bound` from the named stream.
    pub fn uniform_u32(&self, name: &str, n: usize, bound: u32) -> Vec<u32> {
        let mut rng = self.stream(name);
        (0..n).map(|_| rng.gen_range(0..bound)).collect()
    }
}
