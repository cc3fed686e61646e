//! Binary weight files. All integers are little-endian.
//!
//! Packed weight file (`.pqw`):
//!
//! | offset | size  | field                                           |
//! |--------|-------|-------------------------------------------------|
//! | 0      | 4     | magic `PQW1`                                    |
//! | 4      | 1     | weight bits (4 or 2)                            |
//! | 5      | 1     | pack dimension (0 = k, 1 = n)                   |
//! | 6      | 1     | pack count (4 or 8)                             |
//! | 7      | 1     | reserved, 0                                     |
//! | 8      | 4     | k (u32)                                         |
//! | 12     | 4     | n (u32)                                         |
//! | 16     | 4     | gk (u32)                                        |
//! | 20     | 4     | gn (u32)                                        |
//! | 24     | 2·S   | scales, FP16 bits, S = (k/gk)·(n/gn), row-major |
//! | 24+2S  | 2·W   | containers, W = k·n/count                       |
//!
//! Containers are ordered with the non-packed dimension varying fastest:
//! for `k` packing, word `(r, c)` of the `[k/count, n]` grid sits at index
//! `r·n + c`; for `n` packing, word `(r, c)` of the `[k, n/count]` grid sits
//! at index `c·k + r`.
//!
//! Real-valued matrix file (`.pqf`): magic `PQF1`, k (u32), n (u32), then
//! k·n f32 values row-major.

use std::io::{Read, Write};

use super::{
    BitWidth, GroupSpec, PackDim, PackSpec, PackedMatrix, PackedWeights, PackedWord, QuantError, WeightMatrix,
};
use crate::halffloat::HalfBits;
use crate::matrix::Matrix;

pub const WEIGHT_MAGIC: [u8; 4] = *b"PQW1";
pub const MATRIX_MAGIC: [u8; 4] = *b"PQF1";
pub const HEADER_LEN: usize = 24;

fn bad(msg: impl Into<String>) -> QuantError {
    QuantError::Format(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, QuantError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16s(r: &mut impl Read, count: usize) -> Result<Vec<u16>, QuantError> {
    let mut buf = vec![0u8; count * 2];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

pub fn write_weights(w: &mut impl Write, p: &PackedWeights) -> Result<(), QuantError> {
    let spec = p.packed.spec;
    let (k, n) = (p.k(), p.n());
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * (p.scales.as_slice().len() + k * n / spec.count()));
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.push(spec.bits.bits() as u8);
    out.push(match spec.dim {
        PackDim::K => 0,
        PackDim::N => 1,
    });
    out.push(spec.count() as u8);
    out.push(0);
    for v in [k, n, p.group.gk, p.group.gn] {
        let v = u32::try_from(v).map_err(|_| bad("dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in p.scales.as_slice() {
        out.extend_from_slice(&s.to_bits().to_le_bytes());
    }
    let (rows, cols) = p.packed.words.shape();
    let mut push = |r: usize, c: usize| out.extend_from_slice(&p.packed.words[(r, c)].raw.to_le_bytes());
    match spec.dim {
        PackDim::K => {
            for r in 0..rows {
                for c in 0..cols {
                    push(r, c);
                }
            }
        }
        PackDim::N => {
            for c in 0..cols {
                for r in 0..rows {
                    push(r, c);
                }
            }
        }
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn read_weights(r: &mut impl Read) -> Result<PackedWeights, QuantError> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if head[..4] != WEIGHT_MAGIC {
        return Err(bad("bad magic, expected PQW1"));
    }
    let bits = BitWidth::from_bits(head[4] as u32)?;
    let dim = match head[5] {
        0 => PackDim::K,
        1 => PackDim::N,
        other => return Err(bad(format!("unknown pack dimension {other}"))),
    };
    let spec = PackSpec::new(bits, dim);
    if head[6] as usize != spec.count() {
        return Err(bad(format!("pack count {} does not match {}", head[6], bits)));
    }
    let k = read_u32(r)? as usize;
    let n = read_u32(r)? as usize;
    let group = GroupSpec::new(read_u32(r)? as usize, read_u32(r)? as usize);
    if k == 0 || n == 0 {
        return Err(bad("empty matrix"));
    }
    group.check(k, n)?;
    let extent = match dim {
        PackDim::K => k,
        PackDim::N => n,
    };
    if extent % spec.count() != 0 {
        return Err(QuantError::NotDivisible {
            dim,
            extent,
            count: spec.count(),
        });
    }
    let (gr, gc) = group.grid(k, n);
    let scales: Vec<HalfBits> = read_u16s(r, gr * gc)?.into_iter().map(HalfBits::from_bits).collect();
    if let Some(s) = scales.iter().find(|s| !s.is_normal() || s.sign()) {
        return Err(bad(format!("scale {s:?} is not a positive normal FP16 value")));
    }
    let (rows, cols) = PackedMatrix::grid(spec, k, n);
    let raw = read_u16s(r, rows * cols)?;
    let c = spec.count();
    let words = Matrix::from_fn(rows, cols, |row, col| {
        let (idx, origin) = match dim {
            PackDim::K => (row * cols + col, (row * c, col)),
            PackDim::N => (col * rows + row, (row, col * c)),
        };
        PackedWord {
            raw: raw[idx],
            origin,
            spec,
        }
    });
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after packed words"));
    }
    Ok(PackedWeights {
        packed: PackedMatrix { spec, k, n, words },
        scales: Matrix::from_vec(gr, gc, scales),
        group,
    })
}

pub fn write_matrix(w: &mut impl Write, m: &WeightMatrix<f32>) -> Result<(), QuantError> {
    let mut out = Vec::with_capacity(12 + 4 * m.k() * m.n());
    out.extend_from_slice(&MATRIX_MAGIC);
    out.extend_from_slice(&(m.k() as u32).to_le_bytes());
    out.extend_from_slice(&(m.n() as u32).to_le_bytes());
    for v in m.matrix().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn read_matrix(r: &mut impl Read) -> Result<WeightMatrix<f32>, QuantError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MATRIX_MAGIC {
        return Err(bad("bad magic, expected PQF1"));
    }
    let k = read_u32(r)? as usize;
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; 4 * k * n];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    WeightMatrix::new(Matrix::from_vec(k, n, data))
}
