//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Real, Tensor};

/// Registers parameters into a store, drawing values from one RNG stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform weight of shape `(fan_in, fan_out)`.
    pub fn weight<F: Real>(
        &mut self,
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn([fan_in, fan_out], |_| F::of(self.rng.random_range(-a..a)));
        store.add(name, t)
    }

    pub fn normal<F: Real>(
        &mut self,
        store: &mut ParamStore<F>,
        name: &str,
        shape: &[usize],
        std: f64,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape.to_vec(), |_| F::of(dist.sample(&mut self.rng)));
        store.add(name, t)
    }

    pub fn constant<F: Real>(
        &mut self,
        store: &mut ParamStore<F>,
        name: &str,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        store.add(name, Tensor::full(shape.to_vec(), F::of(value)))
    }
}
