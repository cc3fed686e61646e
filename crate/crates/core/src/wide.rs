//! Exact dyadic values used by wide accumulators and correction steps.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Neg;

use thiserror::Error;

use crate::halffloat::{round_dyadic, Fp16Result, HalfBits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("exact accumulator exceeded 127 bits")]
pub struct WideOverflow;

/// An exact value `mant * 2^exp`, kept in canonical form (odd mantissa, or
/// zero with exponent 0) so that derived equality is value equality.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Wide {
    mant: i128,
    exp: i32,
}

impl Wide {
    pub const ZERO: Wide = Wide { mant: 0, exp: 0 };

    pub fn new(mant: i128, exp: i32) -> Self {
        if mant == 0 {
            return Wide::ZERO;
        }
        let tz = mant.trailing_zeros();
        Wide {
            mant: mant >> tz,
            exp: exp + tz as i32,
        }
    }

    pub fn from_int(v: i64) -> Self {
        Wide::new(v as i128, 0)
    }

    /// Exact value of a finite pattern; `None` for NaN and infinities.
    pub fn from_half(h: HalfBits) -> Option<Self> {
        let (neg, sig, exp) = h.decompose()?;
        let m = sig as i128;
        Some(Wide::new(if neg { -m } else { m }, exp))
    }

    pub fn mantissa(self) -> i128 {
        self.mant
    }

    pub fn exponent(self) -> i32 {
        self.exp
    }

    pub fn is_zero(self) -> bool {
        self.mant == 0
    }

    pub fn is_negative(self) -> bool {
        self.mant < 0
    }

    pub fn abs(self) -> Self {
        Wide {
            mant: self.mant.abs(),
            exp: self.exp,
        }
    }

    /// Mantissas of both operands aligned to the smaller exponent.
    fn aligned(self, rhs: Wide) -> Result<(i128, i128, i32), WideOverflow> {
        if self.is_zero() {
            return Ok((0, rhs.mant, rhs.exp));
        }
        if rhs.is_zero() {
            return Ok((self.mant, 0, self.exp));
        }
        let exp = self.exp.min(rhs.exp);
        let lift = |w: Wide| -> Result<i128, WideOverflow> {
            let s = (w.exp - exp) as u32;
            if s == 0 {
                return Ok(w.mant);
            }
            if s >= 127 || w.mant.unsigned_abs().leading_zeros() <= s {
                return Err(WideOverflow);
            }
            Ok(w.mant << s)
        };
        Ok((lift(self)?, lift(rhs)?, exp))
    }

    pub fn checked_add(self, rhs: Wide) -> Result<Wide, WideOverflow> {
        let (a, b, exp) = self.aligned(rhs)?;
        let sum = a.checked_add(b).ok_or(WideOverflow)?;
        Ok(Wide::new(sum, exp))
    }

    pub fn checked_sub(self, rhs: Wide) -> Result<Wide, WideOverflow> {
        self.checked_add(-rhs)
    }

    pub fn checked_mul(self, rhs: Wide) -> Result<Wide, WideOverflow> {
        let mant = self.mant.checked_mul(rhs.mant).ok_or(WideOverflow)?;
        Ok(Wide::new(mant, self.exp + rhs.exp))
    }

    pub fn checked_mul_int(self, k: i64) -> Result<Wide, WideOverflow> {
        self.checked_mul(Wide::from_int(k))
    }

    /// Rounds once to binary16.
    pub fn to_half(self) -> Fp16Result {
        round_dyadic(self.mant < 0, self.mant.unsigned_abs(), self.exp)
    }

    /// Nearest binary64, for reporting only.
    pub fn to_f64(self) -> f64 {
        self.mant as f64 * (self.exp as f64).exp2()
    }

    /// Magnitude comparison without overflow.
    pub fn cmp_abs(self, rhs: Wide) -> Ordering {
        let (a, b) = (self.abs(), rhs.abs());
        match (a.is_zero(), b.is_zero()) {
            (true, true) => return Ordering::Equal,
            (true, false) => return Ordering::Less,
            (false, true) => return Ordering::Greater,
            _ => {}
        }
        let top = |w: Wide| w.exp + (128 - w.mant.unsigned_abs().leading_zeros()) as i32;
        match top(a).cmp(&top(b)) {
            Ordering::Equal => {}
            other => return other,
        }
        // same leading-bit position: the aligned mantissas fit in 127 bits
        let (x, y, _) = a.aligned(b).expect("equal magnitudes align");
        x.cmp(&y)
    }
}

impl fmt::Debug for Wide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Wide({} * 2^{} ~ {})", self.mant, self.exp, self.to_f64())
    }
}

impl Neg for Wide {
    type Output = Wide;

    fn neg(self) -> Wide {
        Wide {
            mant: -self.mant,
            exp: self.exp,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halffloat::fp16_encode;

    #[test]
    fn canonical_equality() {
        assert_eq!(Wide::new(8, 0), Wide::new(1, 3));
        assert_eq!(Wide::new(0, 17), Wide::ZERO);
        assert_eq!(Wide::new(-6, -1), Wide::from_int(-3));
    }

    #[test]
    fn exact_arithmetic() {
        let a = Wide::from_half(fp16_encode(1.5f64).value).unwrap();
        let b = Wide::from_half(HalfBits::from_bits(1)).unwrap(); // 2^-24
        let s = a.checked_add(b).unwrap();
        assert_eq!(s.checked_sub(b).unwrap(), a);
        assert_eq!(a.checked_mul_int(4).unwrap(), Wide::from_int(6));
        assert_eq!(a.checked_mul(a).unwrap().to_f64(), 2.25);
    }

    #[test]
    fn overflow_is_reported() {
        let big = Wide::new(1, 120);
        let small = Wide::new(1, -20);
        assert_eq!(big.checked_add(small), Err(WideOverflow));
        let m = Wide::from_int(i64::MAX);
        assert_eq!(m.checked_mul(m).and_then(|x| x.checked_mul(m)), Err(WideOverflow));
    }

    #[test]
    fn rounding_to_half() {
        assert_eq!(Wide::from_int(2067).to_half().value.to_f64(), 2068.0);
        assert_eq!(Wide::new(-1, -25).to_half().value, HalfBits::NEG_ZERO);
    }

    #[test]
    fn magnitude_order() {
        assert_eq!(Wide::from_int(-5).cmp_abs(Wide::new(9, -1)), Ordering::Greater);
        assert_eq!(Wide::from_int(3).cmp_abs(Wide::new(-3, 0)), Ordering::Equal);
        assert_eq!(Wide::ZERO.cmp_abs(Wide::new(1, -60)), Ordering::Less);
        assert_eq!(Wide::new(7, 0).cmp_abs(Wide::new(13, -1)), Ordering::Greater);
    }
}
