//! Named random streams derived from a single seed.
//!
//! Every consumer asks for a stream by `(purpose, id)`; the stream key is a
//! SHA-256 of the seed and both names, fed to a ChaCha generator. Adding a new
//! consumer therefore never shifts the numbers another consumer sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: &str, id: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((purpose.len() as u64).to_le_bytes());
        h.update(purpose.as_bytes());
        h.update(id.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(key)
    }

    pub fn normal(&self, purpose: &str, id: &str, dims: &[usize], std: f64) -> DenseTensor {
        let mut rng = self.stream(purpose, id);
        normal_tensor(&mut rng, dims, std)
    }
}

pub fn normal_tensor(rng: &mut impl Rng, dims: &[usize], std: f64) -> DenseTensor {
    DenseTensor::from_fn(dims, |_| {
        let z: f64 = rng.sample(StandardNormal);
        std * z
    })
    .expect("positive dims")
}
