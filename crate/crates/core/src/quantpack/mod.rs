//! Round-to-nearest weight quantization with two-dimensional groups, and
//! packing of INT4/INT2 weights into 16-bit containers.
//!
//! Weight matrices are `[k, n]`: rows index input features, columns index
//! output features. A container stores its elements in offset binary
//! (`b + 8` for INT4, `b + 2` for INT2), element 0 in the least significant
//! bits, elements ordered by increasing index along the packing dimension.

pub mod format;

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::halffloat::{fp16_encode, fp16_from_int, fp16_mul, Flags, HalfBits};
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("weight matrix must have a positive shape, got {k}x{n}")]
    EmptyMatrix { k: usize, n: usize },
    #[error("non-finite weight at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("group {gk}x{gn} does not tile a {k}x{n} matrix")]
    GroupMismatch { k: usize, n: usize, gk: usize, gn: usize },
    #[error("{dim} extent {extent} is not a multiple of the container count {count}")]
    NotDivisible { dim: PackDim, extent: usize, count: usize },
    #[error("group scale {0} does not fit in FP16")]
    ScaleOverflow(f64),
    #[error("value {value} is outside the signed {bits}-bit range")]
    ValueOutOfRange { value: i32, bits: u32 },
    #[error("pack spec is for INT{spec} but weights are INT{weights}")]
    BitsMismatch { spec: u32, weights: u32 },
    #[error("unsupported weight bit width {0}")]
    UnsupportedBits(u32),
    #[error("malformed weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weight precision carried in a 16-bit container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitWidth {
    #[serde(rename = "4")]
    Int4,
    #[serde(rename = "2")]
    Int2,
}

impl BitWidth {
    pub fn from_bits(bits: u32) -> Result<Self, QuantError> {
        match bits {
            4 => Ok(BitWidth::Int4),
            2 => Ok(BitWidth::Int2),
            other => Err(QuantError::UnsupportedBits(other)),
        }
    }

    #[inline]
    pub const fn bits(self) -> u32 {
        match self {
            BitWidth::Int4 => 4,
            BitWidth::Int2 => 2,
        }
    }

    /// Weights per 16-bit container, which is also the multiplier lane count.
    #[inline]
    pub const fn lanes(self) -> usize {
        16 / self.bits() as usize
    }

    #[inline]
    pub const fn qmin(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    #[inline]
    pub const fn qmax(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }

    /// Offset-binary bias applied to stored values.
    #[inline]
    pub const fn bias(self) -> i32 {
        1 << (self.bits() - 1)
    }

    /// The integer a biased weight decodes to is `b + fp_offset()`:
    /// 1032 for INT4, 1026 for INT2.
    #[inline]
    pub const fn fp_offset(self) -> i32 {
        1024 + self.bias()
    }

    #[inline]
    pub fn contains(self, v: i32) -> bool {
        (self.qmin()..=self.qmax()).contains(&v)
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "INT{}", self.bits())
    }
}

/// Real-valued `[k, n]` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix<T> {
    data: Matrix<T>,
}

impl<T: Float> WeightMatrix<T> {
    pub fn new(data: Matrix<T>) -> Result<Self, QuantError> {
        let (k, n) = data.shape();
        if k == 0 || n == 0 {
            return Err(QuantError::EmptyMatrix { k, n });
        }
        Ok(WeightMatrix { data })
    }

    pub fn k(&self) -> usize {
        self.data.rows()
    }

    pub fn n(&self) -> usize {
        self.data.cols()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[(i, j)]
    }
}

/// Extent of one quantization group along `k` and `n`. `g128` is `[128, 1]`;
/// `g[32,4]` spans 32 input features and 4 output features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSpec {
    pub gk: usize,
    pub gn: usize,
}

impl GroupSpec {
    pub const fn new(gk: usize, gn: usize) -> Self {
        GroupSpec { gk, gn }
    }

    pub const fn size(self) -> usize {
        self.gk * self.gn
    }

    pub fn check(self, k: usize, n: usize) -> Result<(), QuantError> {
        if self.gk == 0 || self.gn == 0 || !k.is_multiple_of(self.gk) || !n.is_multiple_of(self.gn) {
            return Err(QuantError::GroupMismatch {
                k,
                n,
                gk: self.gk,
                gn: self.gn,
            });
        }
        Ok(())
    }

    /// Shape of the scale tensor, `[k / gk, n / gn]`.
    pub const fn grid(self, k: usize, n: usize) -> (usize, usize) {
        (k / self.gk, n / self.gn)
    }

    #[inline]
    pub const fn group_of(self, i: usize, j: usize) -> (usize, usize) {
        (i / self.gk, j / self.gn)
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g[{},{}]", self.gk, self.gn)
    }
}

/// Integer weights plus one positive FP16 scale per group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedWeights {
    pub values: Matrix<i8>,
    /// `[k / gk, n / gn]`, group blocks in row-major order.
    pub scales: Matrix<HalfBits>,
    pub bits: BitWidth,
    pub group: GroupSpec,
}

impl QuantizedWeights {
    pub fn new(
        values: Matrix<i8>,
        scales: Matrix<HalfBits>,
        bits: BitWidth,
        group: GroupSpec,
    ) -> Result<Self, QuantError> {
        let (k, n) = values.shape();
        group.check(k, n)?;
        if scales.shape() != group.grid(k, n) {
            return Err(QuantError::Format(format!(
                "scale tensor {:?} does not match {} on {k}x{n}",
                scales.shape(),
                group
            )));
        }
        if let Some(&v) = values.as_slice().iter().find(|&&v| !bits.contains(v as i32)) {
            return Err(QuantError::ValueOutOfRange {
                value: v as i32,
                bits: bits.bits(),
            });
        }
        Ok(QuantizedWeights {
            values,
            scales,
            bits,
            group,
        })
    }

    pub fn k(&self) -> usize {
        self.values.rows()
    }

    pub fn n(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn scale_at(&self, i: usize, j: usize) -> HalfBits {
        self.scales[self.group.group_of(i, j)]
    }
}

/// Symmetric round-to-nearest quantization with two-dimensional groups.
///
/// Per group the scale is `max|w| / qmax` rounded to FP16 (never below the
/// smallest normal FP16, which is also the scale of an all-zero group).
/// Values are `clamp(round_half_even(w / scale))` against the stored scale.
pub fn rtn_quantize<T: Float>(
    w: &WeightMatrix<T>,
    bits: BitWidth,
    group: GroupSpec,
) -> Result<QuantizedWeights, QuantError> {
    let (k, n) = (w.k(), w.n());
    group.check(k, n)?;
    let (gr, gc) = group.grid(k, n);
    let mut scales = Matrix::filled(gr, gc, HalfBits::MIN_POSITIVE);
    let mut values = Matrix::filled(k, n, 0i8);
    let qmax = bits.qmax() as f64;

    for bi in 0..gr {
        for bj in 0..gc {
            let rows = bi * group.gk..(bi + 1) * group.gk;
            let cols = bj * group.gn..(bj + 1) * group.gn;
            let mut maxabs = 0.0f64;
            for i in rows.clone() {
                for j in cols.clone() {
                    let v = w.get(i, j).to_f64().ok_or(QuantError::NonFinite(i, j))?;
                    if !v.is_finite() {
                        return Err(QuantError::NonFinite(i, j));
                    }
                    maxabs = maxabs.max(v.abs());
                }
            }
            if maxabs == 0.0 {
                continue;
            }
            let raw = maxabs / qmax;
            let enc = fp16_encode(raw);
            if enc.flags.contains(Flags::OVERFLOW) {
                return Err(QuantError::ScaleOverflow(raw));
            }
            let scale = if enc.value.is_normal() {
                enc.value
            } else {
                HalfBits::MIN_POSITIVE
            };
            scales[(bi, bj)] = scale;
            let s = scale.to_f64();
            for i in rows.clone() {
                for j in cols.clone() {
                    let v = w.get(i, j).to_f64().expect("checked above");
                    let q = (v / s).round_ties_even() as i32;
                    values[(i, j)] = q.clamp(bits.qmin(), bits.qmax()) as i8;
                }
            }
        }
    }
    QuantizedWeights::new(values, scales, bits, group)
}

/// FP16 materialization `fp16(q * scale)` of every weight, as the standard
/// dequantize-then-GEMM flow would produce it.
pub fn dequantize(q: &QuantizedWeights) -> Matrix<HalfBits> {
    Matrix::from_fn(q.k(), q.n(), |i, j| {
        let v = fp16_from_int(q.values[(i, j)] as i64).expect("INT4/INT2 values are exact");
        fp16_mul(v, q.scale_at(i, j)).value
    })
}

/// [`dequantize`] converted to a real-valued matrix.
pub fn dequantize_as<T: Float>(q: &QuantizedWeights) -> WeightMatrix<T> {
    WeightMatrix {
        data: dequantize(q).map(|h| h.to_float::<T>()),
    }
}

/// Dimension along which consecutive weights share a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackDim {
    K,
    N,
}

impl fmt::Display for PackDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PackDim::K => "k",
            PackDim::N => "n",
        })
    }
}

/// `P(B_count)_dim`: `count` weights of `bits` each per 16-bit container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PackSpec {
    pub bits: BitWidth,
    pub dim: PackDim,
}

impl PackSpec {
    pub const fn new(bits: BitWidth, dim: PackDim) -> Self {
        PackSpec { bits, dim }
    }

    #[inline]
    pub const fn count(self) -> usize {
        self.bits.lanes()
    }
}

impl fmt::Display for PackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P(B_{})_{}", self.count(), self.dim)
    }
}

/// One 16-bit container and the `(k, n)` position of its element 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PackedWord {
    pub raw: u16,
    pub origin: (usize, usize),
    pub spec: PackSpec,
}

impl PackedWord {
    /// Packs signed values, element 0 into the least significant bits.
    pub fn from_values(values: &[i8], spec: PackSpec, origin: (usize, usize)) -> Result<Self, QuantError> {
        let bits = spec.bits;
        if values.len() != spec.count() {
            return Err(QuantError::Format(format!(
                "{} values for a {}-element container",
                values.len(),
                spec.count()
            )));
        }
        let mut raw = 0u16;
        for (i, &v) in values.iter().enumerate() {
            if !bits.contains(v as i32) {
                return Err(QuantError::ValueOutOfRange {
                    value: v as i32,
                    bits: bits.bits(),
                });
            }
            let field = (v as i32 + bits.bias()) as u16;
            raw |= field << (i as u32 * bits.bits());
        }
        Ok(PackedWord { raw, origin, spec })
    }

    /// Offset-binary field of element `i`, i.e. `b + 8` or `b + 2`.
    #[inline]
    pub fn biased(self, i: usize) -> u8 {
        let b = self.spec.bits.bits();
        ((self.raw >> (i as u32 * b)) & ((1 << b) - 1)) as u8
    }

    #[inline]
    pub fn value(self, i: usize) -> i8 {
        (self.biased(i) as i32 - self.spec.bits.bias()) as i8
    }

    /// Inverse of [`PackedWord::from_values`].
    pub fn unpack(self) -> Vec<i8> {
        (0..self.spec.count()).map(|i| self.value(i)).collect()
    }

    /// Matrix coordinates of element `i`.
    pub fn position(self, i: usize) -> (usize, usize) {
        match self.spec.dim {
            PackDim::K => (self.origin.0 + i, self.origin.1),
            PackDim::N => (self.origin.0, self.origin.1 + i),
        }
    }
}

/// Free-function form of [`PackedWord::unpack`].
pub fn unpack(word: PackedWord) -> Vec<i8> {
    word.unpack()
}

/// A `[k, n]` weight matrix held as a grid of containers. Along the packed
/// dimension the grid is `count` times shorter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedMatrix {
    pub spec: PackSpec,
    pub k: usize,
    pub n: usize,
    pub words: Matrix<PackedWord>,
}

impl PackedMatrix {
    /// Grid shape `(rows, cols)` in containers.
    pub fn grid(spec: PackSpec, k: usize, n: usize) -> (usize, usize) {
        match spec.dim {
            PackDim::K => (k / spec.count(), n),
            PackDim::N => (k, n / spec.count()),
        }
    }

    /// Container holding weight `(i, j)` and the element index inside it.
    #[inline]
    pub fn locate(&self, i: usize, j: usize) -> (PackedWord, usize) {
        let c = self.spec.count();
        match self.spec.dim {
            PackDim::K => (self.words[(i / c, j)], i % c),
            PackDim::N => (self.words[(i, j / c)], j % c),
        }
    }

    pub fn value(&self, i: usize, j: usize) -> i8 {
        let (w, e) = self.locate(i, j);
        w.value(e)
    }

    pub fn to_values(&self) -> Matrix<i8> {
        Matrix::from_fn(self.k, self.n, |i, j| self.value(i, j))
    }
}

fn check_packable(spec: PackSpec, k: usize, n: usize) -> Result<(), QuantError> {
    let extent = match spec.dim {
        PackDim::K => k,
        PackDim::N => n,
    };
    if extent % spec.count() != 0 {
        return Err(QuantError::NotDivisible {
            dim: spec.dim,
            extent,
            count: spec.count(),
        });
    }
    Ok(())
}

/// Packs quantized values along `spec.dim`. No padding: the packed extent
/// must be a multiple of the container count.
pub fn pack(q: &QuantizedWeights, spec: PackSpec) -> Result<PackedMatrix, QuantError> {
    if spec.bits != q.bits {
        return Err(QuantError::BitsMismatch {
            spec: spec.bits.bits(),
            weights: q.bits.bits(),
        });
    }
    let (k, n) = (q.k(), q.n());
    check_packable(spec, k, n)?;
    let (rows, cols) = PackedMatrix::grid(spec, k, n);
    let c = spec.count();
    let mut words = Vec::with_capacity(rows * cols);
    let mut lane = vec![0i8; c];
    for r in 0..rows {
        for col in 0..cols {
            let origin = match spec.dim {
                PackDim::K => (r * c, col),
                PackDim::N => (r, col * c),
            };
            for (e, slot) in lane.iter_mut().enumerate() {
                *slot = match spec.dim {
                    PackDim::K => q.values[(origin.0 + e, origin.1)],
                    PackDim::N => q.values[(origin.0, origin.1 + e)],
                };
            }
            words.push(PackedWord::from_values(&lane, spec, origin)?);
        }
    }
    Ok(PackedMatrix {
        spec,
        k,
        n,
        words: Matrix::from_vec(rows, cols, words),
    })
}

/// Packed weights together with their group scales: everything a weight file
/// carries and everything the packed GEMM flows consume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedWeights {
    pub packed: PackedMatrix,
    pub scales: Matrix<HalfBits>,
    pub group: GroupSpec,
}

impl PackedWeights {
    pub fn from_quantized(q: &QuantizedWeights, dim: PackDim) -> Result<Self, QuantError> {
        let packed = pack(q, PackSpec::new(q.bits, dim))?;
        Ok(PackedWeights {
            packed,
            scales: q.scales.clone(),
            group: q.group,
        })
    }

    pub fn bits(&self) -> BitWidth {
        self.packed.spec.bits
    }

    pub fn k(&self) -> usize {
        self.packed.k
    }

    pub fn n(&self) -> usize {
        self.packed.n
    }

    #[inline]
    pub fn scale_at(&self, i: usize, j: usize) -> HalfBits {
        self.scales[self.group.group_of(i, j)]
    }

    pub fn to_quantized(&self) -> Result<QuantizedWeights, QuantError> {
        QuantizedWeights::new(self.packed.to_values(), self.scales.clone(), self.bits(), self.group)
    }

    /// Same weights repacked along the other dimension.
    pub fn repack(&self, dim: PackDim) -> Result<Self, QuantError> {
        PackedWeights::from_quantized(&self.to_quantized()?, dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wm(k: usize, n: usize, v: Vec<f64>) -> WeightMatrix<f64> {
        WeightMatrix::new(Matrix::from_vec(k, n, v)).unwrap()
    }

    #[test]
    fn bit_width_constants() {
        assert_eq!((BitWidth::Int4.qmin(), BitWidth::Int4.qmax()), (-8, 7));
        assert_eq!((BitWidth::Int2.qmin(), BitWidth::Int2.qmax()), (-2, 1));
        assert_eq!(BitWidth::Int4.fp_offset(), 1032);
        assert_eq!(BitWidth::Int2.fp_offset(), 1026);
        assert_eq!(BitWidth::Int2.lanes(), 8);
        assert!(BitWidth::from_bits(3).is_err());
    }

    #[test]
    fn rtn_example_group() {
        let w = wm(1, 4, vec![0.7, -0.7, 0.35, 0.0]);
        let q = rtn_quantize(&w, BitWidth::Int4, GroupSpec::new(1, 4)).unwrap();
        assert_eq!(q.scales[(0, 0)], fp16_encode(0.1f64).value);
        assert_eq!(q.values.as_slice(), &[7, -7, 4, 0]);
    }

    #[test]
    fn rtn_zero_group() {
        let w = wm(2, 2, vec![0.0; 4]);
        let q = rtn_quantize(&w, BitWidth::Int2, GroupSpec::new(2, 2)).unwrap();
        assert_eq!(q.scales[(0, 0)], HalfBits::MIN_POSITIVE);
        assert!(q.values.as_slice().iter().all(|&v| v == 0));
        assert!(dequantize(&q).as_slice().iter().all(|h| h.is_zero()));
    }

    #[test]
    fn rtn_fixed_point() {
        // w = q * 0.25 with q spanning the INT4 range and max |q| = 7
        let qs = [-7i8, 3, 0, 7, -1, 2, -4, 5];
        let w = wm(2, 4, qs.iter().map(|&q| q as f64 * 0.25).collect());
        let q = rtn_quantize(&w, BitWidth::Int4, GroupSpec::new(2, 4)).unwrap();
        assert_eq!(q.scales[(0, 0)].to_f64(), 0.25);
        assert_eq!(q.values.as_slice(), &qs);
        let back = dequantize_as::<f64>(&q);
        assert_eq!(back.matrix(), w.matrix());
    }

    #[test]
    fn rtn_errors() {
        let w = wm(2, 3, vec![0.0; 6]);
        assert!(matches!(
            rtn_quantize(&w, BitWidth::Int4, GroupSpec::new(2, 2)),
            Err(QuantError::GroupMismatch { .. })
        ));
        let w = wm(1, 2, vec![f64::NAN, 1.0]);
        assert!(matches!(
            rtn_quantize(&w, BitWidth::Int4, GroupSpec::new(1, 2)),
            Err(QuantError::NonFinite(0, 0))
        ));
        let w = wm(1, 2, vec![1.0e6, 1.0]);
        assert!(matches!(
            rtn_quantize(&w, BitWidth::Int4, GroupSpec::new(1, 2)),
            Err(QuantError::ScaleOverflow(_))
        ));
        assert!(WeightMatrix::new(Matrix::<f32>::from_vec(0, 3, vec![])).is_err());
    }

    #[test]
    fn tiny_weights_use_min_normal_scale() {
        let w = wm(1, 2, vec![1.0e-7, -2.0e-7]);
        let q = rtn_quantize(&w, BitWidth::Int4, GroupSpec::new(1, 2)).unwrap();
        assert_eq!(q.scales[(0, 0)], HalfBits::MIN_POSITIVE);
        assert_eq!(q.values.as_slice(), &[0, 0]);
    }

    #[test]
    fn dequantize_examples() {
        let scales = Matrix::from_vec(1, 3, vec![fp16_encode(0.1f64).value, HalfBits::ONE, HalfBits::ONE]);
        let q = QuantizedWeights::new(
            Matrix::from_vec(1, 3, vec![7, 0, -8]),
            scales,
            BitWidth::Int4,
            GroupSpec::new(1, 1),
        )
        .unwrap();
        let d = dequantize(&q);
        // the stored scale is fp16(0.1) = 0.0999755859375, so the product
        // rounds one ulp below fp16(0.7)
        let s = fp16_encode(0.1f64).value.to_f64();
        assert_eq!(d[(0, 0)], fp16_encode(7.0 * s).value);
        assert_eq!(d[(0, 0)].to_f64(), 0.69970703125);
        assert_eq!(d[(0, 0)].ulp_distance(fp16_encode(0.7f64).value), 1);
        assert_eq!(d[(0, 1)], HalfBits::ZERO);
        assert_eq!(d[(0, 2)].to_f64(), -8.0);
    }

    #[test]
    fn pack_int4_along_n() {
        let spec = PackSpec::new(BitWidth::Int4, PackDim::N);
        let w = PackedWord::from_values(&[-8, 0, 3, 7], spec, (0, 0)).unwrap();
        assert_eq!(w.raw, 0xfb80);
        assert_eq!((0..4).map(|i| w.biased(i)).collect::<Vec<_>>(), vec![0, 8, 11, 15]);
        assert_eq!(unpack(w), vec![-8, 0, 3, 7]);
    }

    #[test]
    fn pack_int2_along_k() {
        let spec = PackSpec::new(BitWidth::Int2, PackDim::K);
        let vals = [-2i8, -1, 0, 1, -2, -1, 0, 1];
        let w = PackedWord::from_values(&vals, spec, (8, 3)).unwrap();
        assert_eq!(
            (0..8).map(|i| w.biased(i)).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 0, 1, 2, 3]
        );
        assert_eq!(w.raw, 0b11_10_01_00_11_10_01_00);
        assert_eq!(w.unpack(), vals);
        assert_eq!(w.position(5), (13, 3));
    }

    #[test]
    fn pack_rejects_bad_input() {
        let spec = PackSpec::new(BitWidth::Int4, PackDim::N);
        assert!(PackedWord::from_values(&[8, 0, 0, 0], spec, (0, 0)).is_err());
        assert!(PackedWord::from_values(&[0, 0, 0], spec, (0, 0)).is_err());
        let q = QuantizedWeights::new(
            Matrix::filled(4, 6, 1),
            Matrix::filled(1, 1, HalfBits::ONE),
            BitWidth::Int4,
            GroupSpec::new(4, 6),
        )
        .unwrap();
        assert!(matches!(pack(&q, spec), Err(QuantError::NotDivisible { .. })));
        assert!(pack(&q, PackSpec::new(BitWidth::Int4, PackDim::K)).is_ok());
        assert!(matches!(
            pack(&q, PackSpec::new(BitWidth::Int2, PackDim::K)),
            Err(QuantError::BitsMismatch { .. })
        ));
    }

    #[test]
    fn packed_matrix_layout() {
        let values = Matrix::from_fn(8, 8, |i, j| ((i * 8 + j) % 16) as i8 - 8);
        let q = QuantizedWeights::new(
            values.clone(),
            Matrix::filled(1, 2, HalfBits::ONE),
            BitWidth::Int4,
            GroupSpec::new(8, 4),
        )
        .unwrap();
        for dim in [PackDim::K, PackDim::N] {
            let p = pack(&q, PackSpec::new(BitWidth::Int4, dim)).unwrap();
            assert_eq!(p.to_values(), values);
            let grid = p.words.shape();
            assert_eq!(grid, PackedMatrix::grid(p.spec, 8, 8));
            for w in p.words.as_slice() {
                for e in 0..4 {
                    assert_eq!(values[w.position(e)], w.value(e));
                }
            }
        }
    }

    #[test]
    fn group_accounting() {
        let g = GroupSpec::new(32, 4);
        assert_eq!(g.size(), 128);
        assert_eq!(g.grid(128, 128), (4, 32));
        assert_eq!(GroupSpec::new(128, 1).grid(128, 128), (1, 128));
        assert_eq!(g.group_of(33, 9), (1, 2));
    }
}
