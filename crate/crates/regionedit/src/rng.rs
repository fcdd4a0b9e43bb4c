//! Seeded RNG helpers. ChaCha8 keeps streams stable across platforms
//! and library versions, which the bit-reproducibility tests rely on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named sub-task.
pub fn substream(seed: u64, tag: &str) -> Prng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Standard normal via Box-Muller (avoids distribution-crate version drift).
pub fn normal(rng: &mut Prng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_tensor(rng: &mut Prng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Gaussian init scaled by 1/sqrt(fan_in).
pub fn init_tensor(rng: &mut Prng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal(rng) * s).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}
