//! Deterministic random sources.
//!
//! Toy-network weights come from splitmix64 so they are reproducible
//! bit-for-bit on every platform. Gaussian noise fields use ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor3;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// `u64 / 2^64`, in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        self.next_u64() as f64 / 18_446_744_073_709_551_616.0
    }

    /// Uniform in `[-0.05, 0.05)`.
    pub fn next_weight(&mut self) -> f64 {
        self.next_unit() * 0.1 - 0.05
    }

    pub fn weights(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_weight()).collect()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Standard-normal field of the given shape, fully determined by `seed`.
pub fn gaussian_field(seed: u64, height: usize, width: usize, channels: usize) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..height * width * channels)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor3::from_vec(height, width, channels, data).expect("length matches shape")
}
