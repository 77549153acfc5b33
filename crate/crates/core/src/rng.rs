//! Reproducible random streams.
//!
//! Every consumer of randomness receives an explicit [`RngStream`]. Two streams
//! with the same `(base_seed, stream_id)` yield identical sequences no matter
//! how work is partitioned, so Monte Carlo trials can be keyed by trial index.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub base_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(base_seed: u64, stream_id: u64) -> Self {
        Self {
            base_seed,
            stream_id,
        }
    }

    /// Stream for a named subsystem: the id is derived from a hash of the name.
    pub fn named(base_seed: u64, name: &str) -> Self {
        Self::new(base_seed, name_hash(name))
    }

    /// Child stream, e.g. one per trial. Deterministic in `(self, index)`.
    pub fn child(&self, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.base_seed.to_le_bytes());
        h.update(self.stream_id.to_le_bytes());
        h.update(index.to_le_bytes());
        let digest = h.finalize();
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        Self::new(self.base_seed, u64::from_le_bytes(id))
    }

    pub fn rng(&self) -> Sampler {
        let mut inner = ChaCha20Rng::seed_from_u64(self.base_seed);
        inner.set_stream(self.stream_id);
        Sampler { inner }
    }
}

pub fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut id = [0u8; 8];
    id.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(id)
}

/// Live generator materialized from an [`RngStream`].
pub struct Sampler {
    inner: ChaCha20Rng,
}

impl Sampler {
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normals(&mut self, count: usize) -> Vec<f64> {
        (0..count).map(|_| self.normal()).collect()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        Uniform::new(lo, hi)
            .expect("uniform bounds must satisfy lo < hi")
            .sample(&mut self.inner)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn index(&mut self, lo: usize, hi: usize) -> usize {
        Uniform::new_inclusive(lo, hi)
            .expect("index bounds must satisfy lo <= hi")
            .sample(&mut self.inner)
    }

    pub fn sign(&mut self) -> f64 {
        if self.uniform(0.0, 1.0) < 0.5 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn inner(&mut self) -> &mut ChaCha20Rng {
        &mut self.inner
    }
}
