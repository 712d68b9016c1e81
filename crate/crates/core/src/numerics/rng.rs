//! Deterministic random number generation.
//!
//! `RngState` wraps a counter-based ChaCha8 stream keyed by a 64-bit seed.
//! The same seed and call sequence yields identical draws on every platform,
//! and `fork` derives statistically independent child streams so that work
//! items (prompts, completions, eval categories) can be processed in any
//! order — or in parallel — without changing the numbers they produce.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit draws made so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derive an independent child stream. Does not consume state from the
    /// parent, so forks are reproducible regardless of interleaving.
    pub fn fork(&self, stream: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Multiply-shift; bias is negligible for the corpus sizes used here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal_f64(&mut self) -> f64 {
        let mut u1 = self.uniform_f64();
        if u1 < 1e-300 {
            u1 = 1e-300;
        }
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_f32(&mut self) -> f32 {
        self.normal_f64() as f32
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>, std: f32) -> Tensor<f32> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.normal_f32() * std).collect();
        Tensor::from_vec(shape, data).expect("shape/data agree")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample an index from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f32]) -> usize {
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        debug_assert!(total > 0.0, "categorical with zero total mass");
        let mut u = self.uniform_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            u -= w as f64;
            if u <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(7);
        let mut b = RngState::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), 100);
    }

    #[test]
    fn same_seed_bit_identical_tensors() {
        let t1 = RngState::new(42).normal_tensor(vec![16, 16], 0.5);
        let t2 = RngState::new(42).normal_tensor(vec![16, 16], 0.5);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t1), bits(&t2));
    }

    #[test]
    fn forks_are_independent_of_parent_consumption() {
        let parent = RngState::new(3);
        let mut f1 = parent.fork(9);
        let mut parent2 = RngState::new(3);
        parent2.next_u64();
        let mut f2 = parent2.fork(9);
        assert_eq!(f1.next_u64(), f2.next_u64());
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = RngState::new(11);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal_f64()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn categorical_respects_weights() {
        let mut rng = RngState::new(5);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[rng.categorical(&[0.2, 0.0, 0.8])] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!(counts[2] > counts[0] * 2);
    }
}
