//! Seeded parameter initialization.
//!
//! All randomness in the crate flows through ChaCha8 generators seeded from
//! explicit u64 values, so identical seeds reproduce identical parameters
//! and shuffles bit for bit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child generator for a named substream, so that adding or
/// reordering parameter groups does not silently change unrelated draws.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    for (i, b) in label.bytes().enumerate().take(24) {
        key[8 + i] ^= b.wrapping_mul(i as u8 + 1);
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform(-r, r) matrix with r = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-r..r)).collect();
    Tensor::from_vec(vec![rows, cols], data).expect("glorot shape")
}
