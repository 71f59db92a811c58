//! Seedable counter-based random streams.
//!
//! Backed by ChaCha8: the key comes from the seed and the 64-bit stream id
//! from a hash of a stream name, so data generation, initialisation and
//! Gumbel noise draw from independent, individually reproducible sequences.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Lower clamp for uniform draws fed to the Gumbel transform (upper is `1 - GUMBEL_CLAMP`).
pub const GUMBEL_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `name` under `seed`.
    pub fn stream(seed: u64, name: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(name));
        Rng { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Standard Gumbel(0, 1) samples of the given shape.
    pub fn gumbel_sample(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| gumbel_transform(self.uniform()))
    }
}

/// `-ln(-ln(u))` with `u` clamped into `[1e-12, 1 - 1e-12]`.
pub fn gumbel_transform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_e_maps_to_zero() {
        assert!(gumbel_transform((-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn clamp_keeps_extremes_finite() {
        assert!(gumbel_transform(0.0).is_finite());
        assert!(gumbel_transform(1.0).is_finite());
    }

    #[test]
    fn same_seed_same_bits() {
        let a = Rng::new(42).gumbel_sample(&[4]);
        let b = Rng::new(42).gumbel_sample(&[4]);
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn named_streams_differ() {
        let a = Rng::stream(1, "data").uniform();
        let b = Rng::stream(1, "init").uniform();
        assert_ne!(a, b);
        assert_eq!(a, Rng::stream(1, "data").uniform());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = Rng::new(7);
        let t = rng.gumbel_sample(&[100_000]);
        let mean = t.values().iter().sum::<f64>() / t.numel() as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }
}
