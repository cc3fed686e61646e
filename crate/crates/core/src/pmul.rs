//! Parallel FP-INT multiplier and dot-product units.
//!
//! A signed weight `b` is stored biased (`b + 8` for INT4, `b + 2` for INT2).
//! Read as an FP16 pattern with exponent `11001`, the biased field is exactly
//! the low mantissa bits of the integer `b + 1032` (`b + 1026`), so one FP16
//! activation times every lane of a container reduces to short
//! `11-bit x 4-bit` (`x 2-bit`) products sharing a sign and exponent. The
//! offset is removed after accumulation:
//! `sum(A (B' - off)) = sum(A B') - off * sum(A)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::halffloat::{fp16_add, fp16_from_int, fp16_mul, Flags, HalfBits, HalfClass};
use crate::quantpack::{BitWidth, PackedWord};
use crate::wide::{Wide, WideOverflow};

/// Biased exponent shared by every biased weight, `11001`.
pub const WEIGHT_EXPONENT: u16 = 25;

/// Fewest significant bits the FP16 offset correction must keep before the
/// result is flagged as cancelled.
pub const CANCELLATION_GUARD_BITS: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PmulError {
    #[error("weight {b} is outside the signed {bits} range")]
    WeightOutOfRange { b: i32, bits: BitWidth },
    #[error("activation {0:?} is {1:?}; the parallel multiplier takes normal or zero operands")]
    UnsupportedActivation(HalfBits, HalfClass),
    #[error("container holds {got} weights but the unit runs in {expected} mode")]
    BitsMismatch { expected: BitWidth, got: BitWidth },
    #[error("dot product needs {expected} operands, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("partial sums come from different accumulator policies")]
    PolicyMismatch,
    #[error("invalid unit configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Overflow(#[from] WideOverflow),
}

/// An offset-binary weight field ready for the multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BiasedWeight {
    bits: BitWidth,
    field: u8,
}

impl BiasedWeight {
    pub fn new(b: i32, bits: BitWidth) -> Result<Self, PmulError> {
        if !bits.contains(b) {
            return Err(PmulError::WeightOutOfRange { b, bits });
        }
        Ok(BiasedWeight {
            bits,
            field: (b + bits.bias()) as u8,
        })
    }

    pub fn field(self) -> u8 {
        self.field
    }

    pub fn bits(self) -> BitWidth {
        self.bits
    }

    /// Pattern with exponent `11001` and the field in the low mantissa bits.
    pub fn to_half(self) -> HalfBits {
        HalfBits::from_parts(false, WEIGHT_EXPONENT, self.field as u16)
    }
}

/// FP16 encoding of `b + 1032` (INT4) or `b + 1026` (INT2).
pub fn encode_biased_weight(b: i32, bits: BitWidth) -> Result<HalfBits, PmulError> {
    Ok(BiasedWeight::new(b, bits)?.to_half())
}

/// One lane of a parallel multiply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Lane {
    /// Rounded FP16 product.
    pub value: HalfBits,
    /// Unrounded significand product `(1024 + m_A) * (1024 + y)`.
    pub product: u32,
    /// The 6-bit add carried into the top five bits of A.
    pub six_bit_carry: bool,
    /// The product reached 2.0 and was shifted right one place.
    pub normalized: bool,
    /// Rounding overflowed the 11-bit significand.
    pub round_carry: bool,
    pub flags: Flags,
}

/// All lanes of one activation times one container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParallelProduct {
    lanes: [Lane; 8],
    count: u8,
    pub shared_sign: bool,
    /// Biased `e_A + 25 - 15`; zero when the zero bypass fired.
    pub shared_exponent: u16,
    pub zero_bypass: bool,
}

impl ParallelProduct {
    pub fn lanes(&self) -> &[Lane] {
        &self.lanes[..self.count as usize]
    }

    pub fn outputs(&self) -> impl Iterator<Item = HalfBits> + '_ {
        self.lanes().iter().map(|l| l.value)
    }

    /// Exact value of lane `i` before rounding.
    pub fn exact(&self, i: usize) -> Wide {
        if self.zero_bypass {
            return Wide::ZERO;
        }
        // A = (1024 + m_A) * 2^(e_A - 25) and the weight is an integer
        let e_a = self.shared_exponent as i32 + 15 - WEIGHT_EXPONENT as i32;
        let p = self.lanes[i].product as i128;
        Wide::new(if self.shared_sign { -p } else { p }, e_a - 25)
    }
}

/// Multiplies one FP16 activation by every weight of a container in one pass.
///
/// Datapath per lane, with `m_A` the 11-bit significand of A and `y` the
/// biased weight field:
/// * `i = m_A * y`, an 11x4-bit (11x2-bit) product, below 2^15;
/// * a 6-bit add of `i[14:10]` with `m_A[5:0]`;
/// * concatenation `{m_A[10:6] + carry, sum[5:0], i[9:0]}`, which equals
///   `m_A * (1024 + y)`;
/// * normalization when the product reaches 2.0, then round-to-nearest-even
///   to 10 fraction bits.
///
/// Every lane equals `fp16_mul(a, encode_biased_weight(b))` bit for bit.
pub fn parallel_fpint_mul(a: HalfBits, w: PackedWord) -> Result<ParallelProduct, PmulError> {
    let count = w.spec.count();
    let mut out = ParallelProduct {
        lanes: [Lane::default(); 8],
        count: count as u8,
        shared_sign: a.sign(),
        shared_exponent: 0,
        zero_bypass: false,
    };
    match a.class() {
        HalfClass::Zero => {
            out.zero_bypass = true;
            let z = if a.sign() { HalfBits::NEG_ZERO } else { HalfBits::ZERO };
            for lane in &mut out.lanes[..count] {
                lane.value = z;
            }
            return Ok(out);
        }
        HalfClass::Normal => {}
        other => return Err(PmulError::UnsupportedActivation(a, other)),
    }

    let sign = a.sign(); // XOR with the always-positive weight sign
    let e_shared = a.exponent() + WEIGHT_EXPONENT - 15;
    out.shared_exponent = e_shared;
    let m_a = 0x400 | a.mantissa() as u32;
    let a_low6 = m_a & 0x3f;
    let a_top5 = m_a >> 6;

    for (idx, lane) in out.lanes[..count].iter_mut().enumerate() {
        let y = w.biased(idx) as u32;
        let i = m_a * y;
        let sum6 = a_low6 + (i >> 10);
        let carry = sum6 >> 6;
        let product = ((a_top5 + carry) << 16) | ((sum6 & 0x3f) << 10) | (i & 0x3ff);
        debug_assert_eq!(product, m_a * (1024 + y));

        let normalized = product >> 21 != 0;
        let shift = if normalized { 11 } else { 10 };
        let kept = product >> shift;
        let rem = product & ((1 << shift) - 1);
        let half = 1 << (shift - 1);
        let mut sig = kept + (rem > half || (rem == half && kept & 1 == 1)) as u32;
        let round_carry = sig == 0x800;
        if round_carry {
            sig = 0x400;
        }
        let exp = e_shared as u32 + normalized as u32 + round_carry as u32;
        let mut flags = if rem != 0 { Flags::INEXACT } else { Flags::NONE };
        let value = if exp > 30 {
            flags |= Flags::OVERFLOW | Flags::INEXACT | Flags::NAN_INF;
            if sign {
                HalfBits::NEG_INFINITY
            } else {
                HalfBits::INFINITY
            }
        } else {
            HalfBits::from_parts(sign, exp as u16, (sig & 0x3ff) as u16)
        };
        *lane = Lane {
            value,
            product,
            six_bit_carry: carry != 0,
            normalized,
            round_carry,
            flags,
        };
    }
    Ok(out)
}

/// Rounding policy for dot-product accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccumulatorPolicy {
    /// Products rounded to FP16, then summed left to right with an FP16
    /// rounding after every add.
    Fp16Sequential,
    /// Exact products summed exactly; one rounding at the very end.
    #[default]
    WideExact,
}

impl fmt::Display for AccumulatorPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccumulatorPolicy::Fp16Sequential => "fp16",
            AccumulatorPolicy::WideExact => "wide",
        })
    }
}

/// A running sum under one accumulator policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartialSum {
    Exact(Wide),
    Half(HalfBits),
}

impl PartialSum {
    pub fn zero(policy: AccumulatorPolicy) -> Self {
        match policy {
            AccumulatorPolicy::WideExact => PartialSum::Exact(Wide::ZERO),
            AccumulatorPolicy::Fp16Sequential => PartialSum::Half(HalfBits::ZERO),
        }
    }

    pub fn policy(self) -> AccumulatorPolicy {
        match self {
            PartialSum::Exact(_) => AccumulatorPolicy::WideExact,
            PartialSum::Half(_) => AccumulatorPolicy::Fp16Sequential,
        }
    }

    /// Adds a term given both exactly and as its FP16 rounding; the policy
    /// picks which one is used.
    pub fn add(&mut self, exact: Wide, rounded: HalfBits) -> Result<Flags, PmulError> {
        match self {
            PartialSum::Exact(acc) => {
                *acc = acc.checked_add(exact)?;
                Ok(Flags::NONE)
            }
            PartialSum::Half(acc) => {
                let r = fp16_add(*acc, rounded);
                *acc = r.value;
                Ok(r.flags)
            }
        }
    }

    pub fn to_half(self) -> HalfBits {
        match self {
            PartialSum::Exact(w) => w.to_half().value,
            PartialSum::Half(h) => h,
        }
    }

    /// Exact value; `None` once an FP16 accumulator has overflowed.
    pub fn exact(self) -> Option<Wide> {
        match self {
            PartialSum::Exact(w) => Some(w),
            PartialSum::Half(h) => Wide::from_half(h),
        }
    }
}

/// Dot-product unit configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Elements reduced per dot-product issue: 4, 8 or 16.
    pub dp_width: usize,
    /// Adder-tree copies; each copy retires one output per cycle.
    pub dup_factor: usize,
    /// Pipeline fill cycles charged once per stream of issues.
    pub fill_latency: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            dp_width: 4,
            dup_factor: 2,
            fill_latency: 3,
        }
    }
}

impl DpConfig {
    pub fn validate(&self, mode: WeightMode) -> Result<(), PmulError> {
        if ![4, 8, 16].contains(&self.dp_width) {
            return Err(PmulError::InvalidConfig(format!(
                "dp_width {} not in {{4, 8, 16}}",
                self.dp_width
            )));
        }
        if ![1, 2, 4].contains(&self.dup_factor) {
            return Err(PmulError::InvalidConfig(format!(
                "dup_factor {} not in {{1, 2, 4}}",
                self.dup_factor
            )));
        }
        if self.dup_factor > mode.products_per_cycle() && mode != WeightMode::Fp16 {
            return Err(PmulError::InvalidConfig(format!(
                "dup_factor {} exceeds the {} products available per cycle",
                self.dup_factor,
                mode.products_per_cycle()
            )));
        }
        Ok(())
    }
}

/// Lane sums of a dot product together with the activation sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpResult {
    /// FP16 view of every lane sum.
    pub outputs: Vec<HalfBits>,
    pub lane_sums: Vec<PartialSum>,
    /// Running `sum(A)` kept by the small side accumulator.
    pub sum_a: PartialSum,
    pub flags: Flags,
}

/// Accumulator state of one parallel dot-product unit across issues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpAccumulator {
    bits: BitWidth,
    lane_sums: Vec<PartialSum>,
    sum_a: PartialSum,
    flags: Flags,
}

impl DpAccumulator {
    pub fn new(bits: BitWidth, policy: AccumulatorPolicy) -> Self {
        DpAccumulator {
            bits,
            lane_sums: vec![PartialSum::zero(policy); bits.lanes()],
            sum_a: PartialSum::zero(policy),
            flags: Flags::NONE,
        }
    }

    /// Feeds one activation and its container through the multiplier.
    pub fn push(&mut self, a: HalfBits, w: PackedWord) -> Result<(), PmulError> {
        if w.spec.bits != self.bits {
            return Err(PmulError::BitsMismatch {
                expected: self.bits,
                got: w.spec.bits,
            });
        }
        let p = parallel_fpint_mul(a, w)?;
        for (j, lane) in p.lanes().iter().enumerate() {
            self.flags |= lane.flags;
            self.flags |= self.lane_sums[j].add(p.exact(j), lane.value)?;
        }
        let a_exact = Wide::from_half(a).expect("checked by the multiplier");
        self.flags |= self.sum_a.add(a_exact, a)?;
        Ok(())
    }

    pub fn finish(self) -> DpResult {
        DpResult {
            outputs: self.lane_sums.iter().map(|s| s.to_half()).collect(),
            lane_sums: self.lane_sums,
            sum_a: self.sum_a,
            flags: self.flags,
        }
    }
}

/// One dot-product issue: `dp_width` activations against `dp_width`
/// containers, reduced per lane.
pub fn parallel_dp(
    a: &[HalfBits],
    w: &[PackedWord],
    cfg: &DpConfig,
    policy: AccumulatorPolicy,
) -> Result<DpResult, PmulError> {
    let bits = match w.first() {
        Some(first) => first.spec.bits,
        None => {
            return Err(PmulError::LengthMismatch {
                expected: cfg.dp_width,
                got: 0,
            })
        }
    };
    cfg.validate(WeightMode::Packed(bits))?;
    for len in [a.len(), w.len()] {
        if len != cfg.dp_width {
            return Err(PmulError::LengthMismatch {
                expected: cfg.dp_width,
                got: len,
            });
        }
    }
    let mut acc = DpAccumulator::new(bits, policy);
    for (&ak, &wk) in a.iter().zip(w) {
        acc.push(ak, wk)?;
    }
    Ok(acc.finish())
}

/// Offset-corrected, scaled output of one lane over one quantization group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correction {
    pub value: HalfBits,
    /// Exact `scale * (sum_ab - off * sum_a)` under the wide policy.
    pub exact: Option<Wide>,
    pub flags: Flags,
}

/// `scale * (sum_ab - offset * sum_a)` with `offset` 1032 (INT4) or
/// 1026 (INT2).
///
/// Under the wide policy the whole expression is exact and rounded once.
/// Under the FP16 policy it runs as three rounded steps (multiply the
/// activation sum by the offset, subtract, apply the scale) and raises
/// `CANCELLATION` when the difference keeps fewer than
/// [`CANCELLATION_GUARD_BITS`] bits above the ulp of `sum_ab`.
pub fn fused_correct(
    sum_ab: PartialSum,
    sum_a: PartialSum,
    scale: HalfBits,
    bits: BitWidth,
) -> Result<Correction, PmulError> {
    let offset = bits.fp_offset() as i64;
    match (sum_ab, sum_a) {
        (PartialSum::Exact(ab), PartialSum::Exact(sa)) => {
            let s = Wide::from_half(scale).ok_or(PmulError::UnsupportedActivation(scale, scale.class()))?;
            let exact = ab.checked_sub(sa.checked_mul_int(offset)?)?.checked_mul(s)?;
            let r = exact.to_half();
            Ok(Correction {
                value: r.value,
                exact: Some(exact),
                flags: r.flags,
            })
        }
        (PartialSum::Half(ab), PartialSum::Half(sa)) => {
            let off = fp16_from_int(offset).expect("offset below 2048");
            let t1 = fp16_mul(sa, off);
            let t2 = fp16_add(ab, t1.value.neg());
            let t3 = fp16_mul(t2.value, scale);
            let mut flags = t1.flags | t2.flags | t3.flags;
            if let (Some(w_ab), Some(w_sa), Some(lsb)) = (Wide::from_half(ab), Wide::from_half(sa), ab.lsb_exp()) {
                let diff = w_ab.checked_sub(w_sa.checked_mul_int(offset)?)?;
                let threshold = Wide::new(1, lsb + CANCELLATION_GUARD_BITS);
                if !ab.is_zero() && diff.cmp_abs(threshold).is_lt() {
                    flags |= Flags::CANCELLATION;
                }
            }
            Ok(Correction {
                value: t3.value,
                exact: None,
                flags,
            })
        }
        _ => Err(PmulError::PolicyMismatch),
    }
}

/// Operand precision of a dot-product unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightMode {
    /// Baseline FP16 x FP16 unit.
    Fp16,
    /// Parallel FP16 x packed-integer unit.
    Packed(BitWidth),
}

impl WeightMode {
    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            16 => Some(WeightMode::Fp16),
            4 => Some(WeightMode::Packed(BitWidth::Int4)),
            2 => Some(WeightMode::Packed(BitWidth::Int2)),
            _ => None,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            WeightMode::Fp16 => 16,
            WeightMode::Packed(b) => b.bits(),
        }
    }

    /// Products one multiplier delivers per cycle: 1, 4 or 8.
    pub fn products_per_cycle(self) -> usize {
        match self {
            WeightMode::Fp16 => 1,
            WeightMode::Packed(b) => b.lanes(),
        }
    }

    /// Outputs retired per cycle by one dot-product unit.
    pub fn outputs_per_cycle(self, cfg: &DpConfig) -> usize {
        match self {
            WeightMode::Fp16 => 1,
            WeightMode::Packed(b) => cfg.dup_factor.min(b.lanes()),
        }
    }
}

/// Workload of a single dot-product unit. For packed modes `n` counts
/// containers, each contributing one output per lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl UnitShape {
    pub const fn new(m: usize, n: usize, k: usize) -> Self {
        UnitShape { m, n, k }
    }
}

/// Dot-product outputs the unit must retire for `shape`.
pub fn dp_outputs(shape: UnitShape, mode: WeightMode, cfg: &DpConfig) -> u64 {
    let lanes = mode.products_per_cycle() as u64;
    (shape.m * shape.n) as u64 * lanes * shape.k.div_ceil(cfg.dp_width) as u64
}

/// `fill_latency + ceil(outputs / outputs_per_cycle)`.
pub fn dp_cycles(shape: UnitShape, mode: WeightMode, cfg: &DpConfig) -> u64 {
    let outputs = dp_outputs(shape, mode, cfg);
    cfg.fill_latency + outputs.div_ceil(mode.outputs_per_cycle(cfg) as u64)
}

/// Counts of datapath events over a set of lanes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CarryStats {
    pub lanes: u64,
    pub six_bit_carries: u64,
    pub normalizations: u64,
    pub round_carries: u64,
}

impl CarryStats {
    pub fn record(&mut self, lane: &Lane) {
        self.lanes += 1;
        self.six_bit_carries += lane.six_bit_carry as u64;
        self.normalizations += lane.normalized as u64;
        self.round_carries += lane.round_carry as u64;
    }
}

/// Outcome of the exhaustive lane-equivalence sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub bits: u32,
    pub activations: u64,
    pub cases: u64,
    pub mismatches: u64,
    /// `(a, b, parallel lane, reference)` bit patterns of the first mismatch.
    pub first_mismatch: Option<(u16, i32, u16, u16)>,
    pub carries: CarryStats,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Compares every lane of the parallel multiplier against [`fp16_mul`] for
/// every normal-or-zero FP16 activation and every weight value.
pub fn verify_exhaustive(bits: BitWidth) -> VerifyReport {
    use crate::quantpack::{PackDim, PackSpec};

    let spec = PackSpec::new(bits, PackDim::N);
    let count = spec.count();
    let values: Vec<i8> = (bits.qmin()..=bits.qmax()).map(|v| v as i8).collect();
    // cover all weight values with as few containers as possible
    let words: Vec<PackedWord> = values
        .chunks(count)
        .map(|chunk| {
            let mut lanes = vec![0i8; count];
            lanes[..chunk.len()].copy_from_slice(chunk);
            PackedWord::from_values(&lanes, spec, (0, 0)).expect("in range")
        })
        .collect();
    let refs: Vec<HalfBits> = values
        .iter()
        .map(|&b| encode_biased_weight(b as i32, bits).expect("in range"))
        .collect();

    let mut report = VerifyReport {
        bits: bits.bits(),
        activations: 0,
        cases: 0,
        mismatches: 0,
        first_mismatch: None,
        carries: CarryStats::default(),
    };
    for raw in 0..=u16::MAX {
        let a = HalfBits::from_bits(raw);
        if !a.is_normal_or_zero() {
            continue;
        }
        report.activations += 1;
        for (wi, &word) in words.iter().enumerate() {
            let p = parallel_fpint_mul(a, word).expect("normal-or-zero activation");
            for (lane_idx, lane) in p.lanes().iter().enumerate() {
                let v = wi * count + lane_idx;
                if v >= values.len() {
                    break;
                }
                report.cases += 1;
                if !p.zero_bypass {
                    report.carries.record(lane);
                }
                let expected = fp16_mul(a, refs[v]).value;
                if lane.value != expected {
                    report.mismatches += 1;
                    report.first_mismatch.get_or_insert((
                        raw,
                        values[v] as i32,
                        lane.value.to_bits(),
                        expected.to_bits(),
                    ));
                }
            }
        }
    }
    report
}
