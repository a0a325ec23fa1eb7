//! Deterministic parameter initializers.
//!
//! Each parameter draws from its own ChaCha stream keyed by the model seed and
//! the parameter name, so adding or removing a component never shifts the
//! initial values of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Real, Tensor};

/// FNV-1a, stable across platforms and releases.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ name_hash(name).rotate_left(17))
}

/// Uniform on `[-bound, bound]`.
pub fn uniform(shape: &[usize], bound: Real, seed: u64, name: &str) -> Tensor {
    let mut rng = stream(seed, name);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-1.0..=1.0) as Real * bound;
    }
    t
}

/// Normal with mean 0 and the given standard deviation.
pub fn normal(shape: &[usize], std: Real, seed: u64, name: &str) -> Tensor {
    let mut rng = stream(seed, name);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = z as Real * std;
    }
    t
}

/// Weight or bias of a linear layer with `fan_in` inputs.
pub fn linear(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor {
    uniform(shape, 1.0 / (fan_in as Real).sqrt(), seed, name)
}
