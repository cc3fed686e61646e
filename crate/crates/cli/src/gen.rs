//! Seeded operand generators.
//!
//! Activations are uniform in [-2, 2], rounded to FP16, with the rare
//! subnormal draws flushed to zero (the parallel multiplier takes normal or
//! zero activations). Real-valued weights are uniform in [-1, 1].

use pacq_core::quantpack::WeightMatrix;
use pacq_core::{fp16_encode, HalfBits, HalfMatrix, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn activation(rng: &mut impl Rng) -> HalfBits {
    let h = fp16_encode(rng.random_range(-2.0f64..=2.0)).value;
    if h.is_subnormal() {
        HalfBits::ZERO
    } else {
        h
    }
}

pub fn activations(rng: &mut impl Rng, m: usize, k: usize) -> HalfMatrix {
    Matrix::from_fn(m, k, |_, _| activation(rng))
}

pub fn real_weights(rng: &mut impl Rng, k: usize, n: usize) -> WeightMatrix<f32> {
    WeightMatrix::new(Matrix::from_fn(k, n, |_, _| rng.random_range(-1.0f32..=1.0))).expect("finite draws")
}

/// FP16 weights for the unquantized baseline.
pub fn half_weights(rng: &mut impl Rng, k: usize, n: usize) -> HalfMatrix {
    Matrix::from_fn(k, n, |_, _| fp16_encode(rng.random_range(-1.0f64..=1.0)).value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_are_normal_or_zero_and_bounded() {
        let mut r = rng(3);
        let a = activations(&mut r, 64, 64);
        for h in a.as_slice() {
            assert!(h.is_normal_or_zero());
            assert!(h.to_f64().abs() <= 2.0);
        }
    }

    #[test]
    fn seed_determines_draws() {
        assert_eq!(activations(&mut rng(5), 4, 4), activations(&mut rng(5), 4, 4));
        assert_ne!(activations(&mut rng(5), 4, 4), activations(&mut rng(6), 4, 4));
    }
}
