//! Test oracles built on `half` and `num-bigint`, independent of the crate's
//! own rounding code.
#![allow(dead_code)]

use half::f16;
use num_bigint::BigInt;
use num_traits::{FromPrimitive, Signed, ToPrimitive, Zero};
use pacq_core::HalfBits;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Finest grid every test value lives on: FP16 values are multiples of
/// 2^-24 and products of two FP16 values multiples of 2^-48.
pub const LSB: i32 = -48;

pub fn value_of(h: HalfBits) -> f64 {
    f16::from_bits(h.to_bits()).to_f64()
}

/// `h` as an integer count of `2^LSB`.
pub fn scaled(h: HalfBits) -> BigInt {
    BigInt::from_f64(value_of(h) * 2f64.powi(-LSB)).expect("finite")
}

/// Exact value of a finite binary16 pattern as an integer count of `2^lsb`.
fn candidate_value(bits: u16, lsb: i32) -> Option<BigInt> {
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as i64;
    if exp == 31 {
        return None;
    }
    let (sig, e) = if exp == 0 {
        (frac, -24)
    } else {
        (frac | 0x400, exp - 25)
    };
    let v = BigInt::from(sig) << (e - lsb) as usize;
    Some(if bits & 0x8000 != 0 { -v } else { v })
}

/// Round-to-nearest-even of `n * 2^LSB` to binary16.
pub fn round_scaled(n: &BigInt) -> u16 {
    let approx = n.to_f64().unwrap() * 2f64.powi(LSB);
    round_at(n, LSB, approx)
}

/// Round-to-nearest-even of `n * 2^lsb` (`lsb <= -24`) to binary16, decided
/// by exact comparisons between the neighbours of the estimate `approx`.
pub fn round_at(n: &BigInt, lsb: i32, approx: f64) -> u16 {
    assert!(lsb <= -24);
    if n.is_zero() {
        return 0;
    }
    let neg = n.is_negative();
    let limit = BigInt::from(65520) << (-lsb) as usize;
    if n.abs() >= limit {
        return if neg { 0xfc00 } else { 0x7c00 };
    }
    let h0 = f16::from_f64(approx).to_bits();
    let mut cands = vec![h0, h0.wrapping_add(1), h0.wrapping_sub(1)];
    if h0 & 0x7fff == 0 {
        cands.extend([0x0001, 0x8001, 0x0000]);
    }
    let mut best: Option<(BigInt, u16)> = None;
    for c in cands {
        let Some(v) = candidate_value(c, lsb) else { continue };
        let d = (n - v).abs();
        let better = match &best {
            None => true,
            Some((bd, bb)) => d < *bd || (d == *bd && c & 1 == 0 && bb & 1 == 1),
        };
        if better {
            best = Some((d, c));
        }
    }
    let bits = best.unwrap().1;
    if bits & 0x7fff == 0 {
        if neg {
            0x8000
        } else {
            0
        }
    } else {
        bits
    }
}

/// Round-to-nearest-even of a finite f64.
pub fn round_f64(v: f64) -> u16 {
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1 << 52) - 1)) as i64;
    let (sig, e) = if exp == 0 {
        (frac, -1074)
    } else {
        (frac | 1 << 52, exp - 1075)
    };
    let lsb = e.min(-48);
    let mut n = BigInt::from(sig) << (e - lsb) as usize;
    if v < 0.0 {
        n = -n;
    }
    if n.is_zero() {
        return if v.is_sign_negative() { 0x8000 } else { 0 };
    }
    round_at(&n, lsb, v)
}

/// Uniform in [-2, 2], encoded to FP16 with subnormals flushed to zero.
pub fn activation(rng: &mut ChaCha8Rng) -> HalfBits {
    let v = f16::from_f64(rng.random_range(-2.0..=2.0));
    if !v.is_normal() && v.to_bits() & 0x7fff != 0 {
        HalfBits::ZERO
    } else {
        HalfBits::from_bits(v.to_bits())
    }
}
