mod common;

use half::f16;
use pacq_core::halffloat::{fp16_add, fp16_encode, fp16_mul, fp16_sub, Flags, HalfBits};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn same(ours: HalfBits, theirs: f16) -> bool {
    if theirs.is_nan() {
        ours.is_nan()
    } else {
        ours.to_bits() == theirs.to_bits()
    }
}

#[test]
fn decode_encode_round_trip_all_patterns() {
    for raw in 0..=u16::MAX {
        let h = HalfBits::from_bits(raw);
        let reference = f16::from_bits(raw);
        if reference.is_nan() {
            assert!(h.is_nan() && h.to_f64().is_nan());
            assert!(fp16_encode(h.to_f64()).value.is_nan());
            continue;
        }
        assert_eq!(h.to_f64(), reference.to_f64(), "decode {raw:#06x}");
        let back = fp16_encode(h.to_f64());
        assert_eq!(back.value, h, "encode {raw:#06x}");
        assert!(!back.flags.contains(Flags::INEXACT));
        assert_eq!(h.to_float::<f32>(), reference.to_f32());
    }
}

#[test]
fn random_mul_add_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..1_000_000 {
        let (x, y): (u16, u16) = (rng.random(), rng.random());
        let (a, b) = (HalfBits::from_bits(x), HalfBits::from_bits(y));
        let (ra, rb) = (f16::from_bits(x), f16::from_bits(y));
        assert!(same(fp16_mul(a, b).value, ra * rb), "{x:#06x} * {y:#06x}");
        assert!(same(fp16_add(a, b).value, ra + rb), "{x:#06x} + {y:#06x}");
    }
}

#[test]
fn close_exponents_add_match_reference() {
    // random bit patterns rarely cancel; bias toward nearby magnitudes
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200_000 {
        let x: u16 = rng.random_range(0..0x7c00);
        let delta: i32 = rng.random_range(-40..=40);
        let y = ((x as i32 + delta).clamp(0, 0x7bff) as u16) | 0x8000;
        let (a, b) = (HalfBits::from_bits(x), HalfBits::from_bits(y));
        let r = f16::from_bits(x) + f16::from_bits(y);
        assert!(same(fp16_add(a, b).value, r), "{x:#06x} + {y:#06x}");
        assert!(same(fp16_sub(a, b.neg()).value, r));
    }
}

#[test]
fn encode_rounds_f64_once() {
    // just above the midpoint of 60544 and 60576; rounding via f32 would tie
    let v = -6.056000135451148e4;
    assert_eq!(fp16_encode(v).value.to_f64(), -60576.0);
    assert_eq!(common::round_f64(v), fp16_encode(v).value.to_bits());
}

#[test]
fn encode_matches_reference_on_random_doubles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200_000 {
        let e: i32 = rng.random_range(-30..18);
        let v = rng.random_range(-1.0..1.0) * 2f64.powi(e);
        // f16::from_f64 rounds through f32 on some paths, so f64 inputs go to
        // the exact oracle instead
        assert_eq!(fp16_encode(v).value.to_bits(), common::round_f64(v), "{v:e}");
        assert!(same(fp16_encode(v as f32).value, f16::from_f32(v as f32)), "{v:e}");
    }
}

proptest! {
    #[test]
    fn mul_commutes(x: u16, y: u16) {
        let (a, b) = (HalfBits::from_bits(x), HalfBits::from_bits(y));
        let (p, q) = (fp16_mul(a, b), fp16_mul(b, a));
        prop_assert!(p.value == q.value || (p.value.is_nan() && q.value.is_nan()));
        prop_assert_eq!(p.flags, q.flags);
    }

    #[test]
    fn add_commutes(x: u16, y: u16) {
        let (a, b) = (HalfBits::from_bits(x), HalfBits::from_bits(y));
        let (p, q) = (fp16_add(a, b), fp16_add(b, a));
        prop_assert!(p.value == q.value || (p.value.is_nan() && q.value.is_nan()));
    }

    #[test]
    fn inexact_flag_is_truthful(x in 0u16..0x7c00, y in 0u16..0x7c00) {
        let (a, b) = (HalfBits::from_bits(x), HalfBits::from_bits(y));
        let p = fp16_mul(a, b);
        let exact = a.to_f64() * b.to_f64();
        if p.value.is_finite() {
            prop_assert_eq!(p.flags.contains(Flags::INEXACT), p.value.to_f64() != exact);
        } else {
            prop_assert!(p.flags.contains(Flags::OVERFLOW));
        }
    }
}
