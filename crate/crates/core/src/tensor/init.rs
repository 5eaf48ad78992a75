//! Seeded parameter initialization and seed derivation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed from a base seed, a stream tag and an index,
/// by chaining the splitmix64 finalizer. Used for per-epoch shuffles and
/// per-trial seeds so that runs stay reproducible yet de-correlated.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)) ^ index)
}

/// One seeded generator consumed in deterministic model-construction order.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Dense weight: uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
    pub fn dense_weight<E: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<E> {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<E> = (0..fan_in * fan_out)
            .map(|_| E::from_f64(self.rng.random_range(-s..s)))
            .collect();
        Tensor::from_vec(vec![fan_in, fan_out], data).expect("weight shape")
    }

    pub fn bias<E: Scalar>(&mut self, n: usize) -> Tensor<E> {
        Tensor::zeros(vec![n])
    }

    /// Embedding table: normal(0, 1/sqrt(dim)).
    pub fn embedding<E: Scalar>(&mut self, vocab: usize, dim: usize) -> Tensor<E> {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid stddev");
        let data: Vec<E> = (0..vocab * dim)
            .map(|_| E::from_f64(normal.sample(&mut self.rng)))
            .collect();
        Tensor::from_vec(vec![vocab, dim], data).expect("embedding shape")
    }
}
