//! Seeded, platform-independent random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Element, Shape, Tensor};

pub type DetRng = ChaCha8Rng;

/// ChaCha8 stream: identical sequence for identical seeds on every platform.
pub fn seeded_rng(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-item seed so parallel generation is independent of completion order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}

pub fn uniform_tensor<T: Element>(
    rng: &mut DetRng,
    shape: impl Into<Shape>,
    lo: f64,
    hi: f64,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(lo..hi)))
}

pub fn normal_tensor<T: Element>(rng: &mut DetRng, shape: impl Into<Shape>, std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}
