//! Functional and access-level model of a SIMT tensor core extended for
//! packed low-bit weights times FP16 activations.
//!
//! * [`halffloat`]: bit-exact binary16 reference arithmetic.
//! * [`quantpack`]: round-to-nearest group quantization and INT4/INT2 packing.
//! * [`pmul`]: the parallel FP-INT multiplier, dot-product units, offset
//!   correction and unit timing.
//! * [`dataflow`]: warp/octet tile simulator for the three GEMM flows.
//! * [`costmodel`]: linear event-energy model and EDP reports.
//!
//! Real-valued surfaces (weight matrices, encoding) are generic over
//! [`num_traits::Float`]; the aliases below pin the common instantiations.

pub mod costmodel;
pub mod dataflow;
pub mod halffloat;
pub mod matrix;
pub mod pmul;
pub mod quantpack;
pub mod wide;

pub use halffloat::{fp16_add, fp16_encode, fp16_from_int, fp16_mul, Flags, Fp16Result, HalfBits, RoundingMode};
pub use matrix::Matrix;
pub use wide::Wide;

/// Matrix of binary16 patterns.
pub type HalfMatrix = Matrix<HalfBits>;
pub type WeightMatrixF32 = quantpack::WeightMatrix<f32>;
pub type WeightMatrixF64 = quantpack::WeightMatrix<f64>;
