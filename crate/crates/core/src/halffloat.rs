//! IEEE-754 binary16 reference arithmetic.
//!
//! Every operation computes the exact real result with integers and rounds
//! once, round-to-nearest-even. These functions are the oracle the parallel
//! multiplier and the dataflow simulator are checked against.

use std::fmt;
use std::ops::{BitOr, BitOrAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXP_BIAS: i32 = 15;
pub const MANT_BITS: u32 = 10;
const EXP_MASK: u16 = 0x7c00;
const MANT_MASK: u16 = 0x03ff;
const SIGN_MASK: u16 = 0x8000;
const HIDDEN: u32 = 1 << MANT_BITS;
/// Exponent of the least significant bit of a subnormal.
const MIN_LSB_EXP: i32 = 1 - EXP_BIAS - MANT_BITS as i32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HalfError {
    #[error("integer {0} is outside the exactly representable range [-2048, 2048]")]
    IntOutOfRange(i64),
}

/// A raw binary16 bit pattern: 1 sign bit, 5 exponent bits (bias 15), 10 fraction bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HalfBits(u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfClass {
    Zero,
    Subnormal,
    Normal,
    Infinite,
    Nan,
}

impl HalfBits {
    pub const ZERO: HalfBits = HalfBits(0x0000);
    pub const NEG_ZERO: HalfBits = HalfBits(0x8000);
    pub const ONE: HalfBits = HalfBits(0x3c00);
    pub const MAX: HalfBits = HalfBits(0x7bff);
    /// Smallest positive normal value, 2^-14.
    pub const MIN_POSITIVE: HalfBits = HalfBits(0x0400);
    pub const INFINITY: HalfBits = HalfBits(0x7c00);
    pub const NEG_INFINITY: HalfBits = HalfBits(0xfc00);
    /// Canonical quiet NaN.
    pub const NAN: HalfBits = HalfBits(0x7e00);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        HalfBits(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Assembles a pattern from fields; out-of-range fields are masked.
    #[inline]
    pub const fn from_parts(sign: bool, exponent: u16, mantissa: u16) -> Self {
        HalfBits(((sign as u16) << 15) | ((exponent & 0x1f) << 10) | (mantissa & MANT_MASK))
    }

    #[inline]
    pub const fn sign(self) -> bool {
        self.0 & SIGN_MASK != 0
    }

    /// Biased 5-bit exponent field.
    #[inline]
    pub const fn exponent(self) -> u16 {
        (self.0 & EXP_MASK) >> 10
    }

    /// 10-bit fraction field, without the hidden bit.
    #[inline]
    pub const fn mantissa(self) -> u16 {
        self.0 & MANT_MASK
    }

    pub const fn class(self) -> HalfClass {
        match (self.exponent(), self.mantissa()) {
            (0, 0) => HalfClass::Zero,
            (0, _) => HalfClass::Subnormal,
            (31, 0) => HalfClass::Infinite,
            (31, _) => HalfClass::Nan,
            _ => HalfClass::Normal,
        }
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        matches!(self.class(), HalfClass::Nan)
    }

    #[inline]
    pub const fn is_finite(self) -> bool {
        self.exponent() != 31
    }

    #[inline]
    pub const fn is_zero(self) -> bool {
        self.0 & !SIGN_MASK == 0
    }

    #[inline]
    pub const fn is_normal(self) -> bool {
        matches!(self.class(), HalfClass::Normal)
    }

    #[inline]
    pub const fn is_subnormal(self) -> bool {
        matches!(self.class(), HalfClass::Subnormal)
    }

    /// The operand contract of the parallel multiplier.
    #[inline]
    pub const fn is_normal_or_zero(self) -> bool {
        matches!(self.class(), HalfClass::Normal | HalfClass::Zero)
    }

    #[inline]
    pub const fn neg(self) -> Self {
        HalfBits(self.0 ^ SIGN_MASK)
    }

    #[inline]
    pub const fn abs(self) -> Self {
        HalfBits(self.0 & !SIGN_MASK)
    }

    /// Splits a finite value into `(negative, significand, exp)` with
    /// value = (-1)^negative * significand * 2^exp. The significand carries
    /// the hidden bit for normal values. `None` for NaN and infinities.
    pub const fn decompose(self) -> Option<(bool, u32, i32)> {
        let e = self.exponent() as i32;
        let m = self.mantissa() as u32;
        match e {
            31 => None,
            0 => Some((self.sign(), m, MIN_LSB_EXP)),
            _ => Some((self.sign(), HIDDEN | m, e - EXP_BIAS - MANT_BITS as i32)),
        }
    }

    /// Exact conversion; every binary16 value is representable in binary64.
    pub fn to_f64(self) -> f64 {
        match self.class() {
            HalfClass::Nan => f64::NAN,
            HalfClass::Infinite if self.sign() => f64::NEG_INFINITY,
            HalfClass::Infinite => f64::INFINITY,
            _ => {
                let (neg, sig, exp) = self.decompose().expect("finite");
                let v = sig as f64 * (exp as f64).exp2();
                if neg {
                    -v
                } else {
                    v
                }
            }
        }
    }

    pub fn to_float<T: Float>(self) -> T {
        T::from(self.to_f64()).expect("binary16 values fit in every float type")
    }

    /// Position on the monotone integer line of finite values, so that
    /// adjacent representable values differ by one. -0 and +0 share 0.
    pub fn ordinal(self) -> i32 {
        let mag = (self.0 & !SIGN_MASK) as i32;
        if self.sign() {
            -mag
        } else {
            mag
        }
    }

    /// Distance in units in the last place between two finite values.
    pub fn ulp_distance(self, other: HalfBits) -> u32 {
        (self.ordinal() - other.ordinal()).unsigned_abs()
    }

    /// Exponent of one unit in the last place: the ulp is 2^lsb_exp.
    pub fn lsb_exp(self) -> Option<i32> {
        self.decompose().map(|(_, _, exp)| exp)
    }
}

impl fmt::Debug for HalfBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HalfBits({:#06x} = {})", self.0, self.to_f64())
    }
}

impl fmt::Display for HalfBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

impl fmt::LowerHex for HalfBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

/// Only one rounding mode is modeled; it is still recorded in traces and
/// reports so results stay self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RoundingMode {
    #[default]
    #[serde(rename = "rne")]
    NearestEven,
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("rne")
    }
}

/// Exception flags raised by an operation.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Flags(u8);

impl Flags {
    pub const NONE: Flags = Flags(0);
    pub const INEXACT: Flags = Flags(1 << 0);
    pub const OVERFLOW: Flags = Flags(1 << 1);
    pub const UNDERFLOW: Flags = Flags(1 << 2);
    /// Invalid operation such as inf * 0 or inf - inf.
    pub const INVALID: Flags = Flags(1 << 3);
    /// A NaN or infinity was consumed or produced.
    pub const NAN_INF: Flags = Flags(1 << 4);
    /// The offset correction cancelled most significant bits.
    pub const CANCELLATION: Flags = Flags(1 << 5);

    #[inline]
    pub const fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }

    #[inline]
    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub const fn bits(self) -> u8 {
        self.0
    }
}

impl BitOr for Flags {
    type Output = Flags;
    fn bitor(self, rhs: Flags) -> Flags {
        Flags(self.0 | rhs.0)
    }
}

impl BitOrAssign for Flags {
    fn bitor_assign(&mut self, rhs: Flags) {
        self.0 |= rhs.0;
    }
}

impl Flags {
    const NAMED: [(Flags, &'static str); 6] = [
        (Flags::INEXACT, "INEXACT"),
        (Flags::OVERFLOW, "OVERFLOW"),
        (Flags::UNDERFLOW, "UNDERFLOW"),
        (Flags::INVALID, "INVALID"),
        (Flags::NAN_INF, "NAN_INF"),
        (Flags::CANCELLATION, "CANCELLATION"),
    ];

    /// Names of the raised flags, in a fixed order.
    pub fn names(self) -> Vec<&'static str> {
        Self::NAMED
            .iter()
            .filter(|(flag, _)| self.contains(*flag))
            .map(|(_, name)| *name)
            .collect()
    }
}

impl fmt::Debug for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Flags({})", self.names().join("|"))
    }
}

/// Result pattern plus the exceptions raised while producing it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fp16Result {
    pub value: HalfBits,
    pub flags: Flags,
}

impl Fp16Result {
    #[inline]
    const fn exact(value: HalfBits) -> Self {
        Fp16Result {
            value,
            flags: Flags::NONE,
        }
    }
}

/// Shifts right by `s` with round-to-nearest-even. Returns the rounded
/// quotient and whether any nonzero bits were discarded.
#[inline]
pub(crate) fn shr_rne(v: u128, s: u32) -> (u128, bool) {
    if s == 0 {
        return (v, false);
    }
    if s > 128 {
        return (0, v != 0);
    }
    let q = if s == 128 { 0 } else { v >> s };
    let rem = if s == 128 { v } else { v - (q << s) };
    let half = 1u128 << (s - 1);
    let round_up = rem > half || (rem == half && q & 1 == 1);
    (q + round_up as u128, rem != 0)
}

/// Rounds the exact value (-1)^negative * sig * 2^exp to binary16.
///
/// Handles normalization, subnormal results and overflow to infinity.
pub fn round_dyadic(negative: bool, sig: u128, exp: i32) -> Fp16Result {
    let sign_bits = if negative { SIGN_MASK } else { 0 };
    if sig == 0 {
        return Fp16Result::exact(HalfBits(sign_bits));
    }
    let width = 128 - sig.leading_zeros() as i32;
    let lead = exp + width - 1;
    let biased = lead + EXP_BIAS;
    let lsb = if biased >= 1 {
        lead - MANT_BITS as i32
    } else {
        MIN_LSB_EXP
    };
    let shift = lsb - exp;
    let (mut q, inexact) = if shift > 0 {
        shr_rne(sig, shift as u32)
    } else {
        // at most MANT_BITS places
        (sig << (-shift) as u32, false)
    };
    let mut flags = if inexact { Flags::INEXACT } else { Flags::NONE };

    if biased >= 1 {
        let mut e = biased;
        if q == (HIDDEN as u128) << 1 {
            q = HIDDEN as u128;
            e += 1;
        }
        if e > 30 {
            flags |= Flags::OVERFLOW | Flags::INEXACT | Flags::NAN_INF;
            return Fp16Result {
                value: HalfBits(sign_bits | EXP_MASK),
                flags,
            };
        }
        let bits = sign_bits | ((e as u16) << 10) | (q as u16 & MANT_MASK);
        Fp16Result {
            value: HalfBits(bits),
            flags,
        }
    } else {
        // q <= 1024; q == 1024 lands exactly on the smallest normal pattern
        if inexact && q < HIDDEN as u128 {
            flags |= Flags::UNDERFLOW;
        }
        Fp16Result {
            value: HalfBits(sign_bits | q as u16),
            flags,
        }
    }
}

/// Rounds a real value to the nearest binary16 pattern.
///
/// Magnitudes past the largest finite value become a signed infinity with
/// `OVERFLOW` raised.
pub fn fp16_encode<T: Float>(value: T) -> Fp16Result {
    if value.is_nan() {
        return Fp16Result {
            value: HalfBits::NAN,
            flags: Flags::NAN_INF,
        };
    }
    if value.is_infinite() {
        let v = if value.is_sign_negative() {
            HalfBits::NEG_INFINITY
        } else {
            HalfBits::INFINITY
        };
        return Fp16Result {
            value: v,
            flags: Flags::NAN_INF,
        };
    }
    let (mant, exp, sign) = value.integer_decode();
    round_dyadic(sign < 0, mant as u128, exp as i32)
}

/// Exact conversion of a small integer. Only |v| <= 2048 is accepted so that
/// this path can never round.
pub fn fp16_from_int(v: i64) -> Result<HalfBits, HalfError> {
    if v.unsigned_abs() > 2048 {
        return Err(HalfError::IntOutOfRange(v));
    }
    let r = round_dyadic(v < 0, v.unsigned_abs() as u128, 0);
    debug_assert!(r.flags.is_empty());
    Ok(r.value)
}

/// Mantissa with the hidden bit made explicit, normalized to 11 bits, and the
/// matching unbiased exponent of its least significant bit.
#[inline]
fn unpack_normalized(h: HalfBits) -> (u32, i32) {
    let (_, mut sig, mut exp) = h.decompose().expect("finite operand");
    while sig < HIDDEN {
        sig <<= 1;
        exp -= 1;
    }
    (sig, exp)
}

fn special_nan(flags: Flags) -> Fp16Result {
    Fp16Result {
        value: HalfBits::NAN,
        flags: flags | Flags::NAN_INF,
    }
}

/// Standard binary16 multiplier.
///
/// Stages: sign XOR, exponent add with bias correction, 11x11-bit mantissa
/// product (hidden bits included, kept exact), then one normalize-and-round
/// step.
pub fn fp16_mul(a: HalfBits, b: HalfBits) -> Fp16Result {
    let negative = a.sign() ^ b.sign();
    let (ca, cb) = (a.class(), b.class());
    if ca == HalfClass::Nan || cb == HalfClass::Nan {
        return special_nan(Flags::NONE);
    }
    if ca == HalfClass::Infinite || cb == HalfClass::Infinite {
        if ca == HalfClass::Zero || cb == HalfClass::Zero {
            return special_nan(Flags::INVALID);
        }
        let inf = if negative {
            HalfBits::NEG_INFINITY
        } else {
            HalfBits::INFINITY
        };
        return Fp16Result {
            value: inf,
            flags: Flags::NAN_INF,
        };
    }
    if ca == HalfClass::Zero || cb == HalfClass::Zero {
        return Fp16Result::exact(if negative { HalfBits::NEG_ZERO } else { HalfBits::ZERO });
    }
    let (ma, ea) = unpack_normalized(a);
    let (mb, eb) = unpack_normalized(b);
    let exp = ea + eb;
    let product = ma as u128 * mb as u128; // < 2^22
    round_dyadic(negative, product, exp)
}

/// Standard binary16 adder: exact aligned sum, one rounding.
pub fn fp16_add(a: HalfBits, b: HalfBits) -> Fp16Result {
    let (ca, cb) = (a.class(), b.class());
    if ca == HalfClass::Nan || cb == HalfClass::Nan {
        return special_nan(Flags::NONE);
    }
    match (ca == HalfClass::Infinite, cb == HalfClass::Infinite) {
        (true, true) if a.sign() != b.sign() => return special_nan(Flags::INVALID),
        (true, _) => {
            return Fp16Result {
                value: a,
                flags: Flags::NAN_INF,
            }
        }
        (_, true) => {
            return Fp16Result {
                value: b,
                flags: Flags::NAN_INF,
            }
        }
        _ => {}
    }
    if a.is_zero() && b.is_zero() {
        let neg = a.sign() && b.sign();
        return Fp16Result::exact(if neg { HalfBits::NEG_ZERO } else { HalfBits::ZERO });
    }
    let (na, sa, ea) = a.decompose().expect("finite");
    let (nb, sb, eb) = b.decompose().expect("finite");
    let exp = ea.min(eb);
    let va = (sa as i128) << (ea - exp);
    let vb = (sb as i128) << (eb - exp);
    let sum = if na { -va } else { va } + if nb { -vb } else { vb };
    if sum == 0 {
        return Fp16Result::exact(HalfBits::ZERO);
    }
    round_dyadic(sum < 0, sum.unsigned_abs(), exp)
}

#[inline]
pub fn fp16_sub(a: HalfBits, b: HalfBits) -> Fp16Result {
    fp16_add(a, b.neg())
}
