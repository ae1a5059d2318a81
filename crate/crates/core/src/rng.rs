//! Seeded randomness. Every stochastic choice in the crate draws from
//! xoshiro256++ seeded through SplitMix64, so streams are identical on
//! every platform for a given seed.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::{Element, Tensor};

pub type Prng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Prng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Independent stream derived from `seed` and a label, so adding a draw in
/// one place does not shift the numbers seen elsewhere.
pub fn stream(seed: u64, label: &str) -> Prng {
    // FNV-1a over the label
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seeded(seed ^ h)
}

/// Normal(0, std²) truncated to ±2 std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn trunc_normal_tensor<T: Element, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(trunc_normal(rng, std) as f32 as f64)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn uniform_tensor<T: Element, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
