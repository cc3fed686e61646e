//! Warp/octet tile simulator for three GEMM flows.
//!
//! A `m16n16k16` warp instruction is split across four octets by output
//! rows: octet `o` owns rows `4o..4o+4` and all 16 columns. Each octet has
//! two dot-product units, DP0 on the first two rows and DP1 on the last two.
//! Operand tiles move from the register file into tensor-core buffers:
//!
//! * A tile: 4 rows of activations for both DPs, one fetch instruction;
//! * B tile: up to `dp_width` rows by 4 columns of 16-bit elements
//!   (FP16 weights or packed containers);
//! * C tile: the octet's partial sums.
//!
//! Loop nests per flow (inside one warp instruction):
//!
//! * `DequantStandard`: weight-stationary, `kt` outer, `nt` inner, the A tile
//!   stays resident across `nt`; C is read and written per B tile.
//! * `KPacked`: containers run along k, so each B tile needs one A fetch per
//!   packed lane with a k stride equal to the lane count.
//! * `NPackedPacq`: output-stationary, containers run along n; one A tile per
//!   `kt` feeds every lane and C is written once.
//!
//! Register traffic is counted in 32-bit registers. Cycles per warp
//! instruction are [`dp_cycles`] over one DP's share of the work, plus stalls
//! for evictions; octets run in parallel and warp instructions in sequence.

use std::fmt;
use std::io::{self, Write};
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::halffloat::{fp16_mul, Flags, HalfBits};
use crate::matrix::Matrix;
use crate::pmul::{
    dp_cycles, fused_correct, AccumulatorPolicy, BiasedWeight, DpAccumulator, DpConfig, PartialSum, PmulError,
    UnitShape, WeightMode,
};
use crate::quantpack::{BitWidth, GroupSpec, PackDim, PackedWeights, QuantError, QuantizedWeights};
use crate::wide::{Wide, WideOverflow};

/// Side of the square warp-level MMA instruction.
pub const WARP_TILE: usize = 16;
pub const OCTETS: usize = 4;
pub const OCTET_ROWS: usize = WARP_TILE / OCTETS;
pub const DPS_PER_OCTET: usize = 2;
pub const DP_ROWS: usize = OCTET_ROWS / DPS_PER_OCTET;
/// Columns of a B or C tile, in 16-bit elements.
pub const TILE_COLS: usize = 4;

#[derive(Debug, Error)]
pub enum DataflowError {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("flow {flow} expects {expected}")]
    Operand { flow: FlowKind, expected: &'static str },
    #[error("operand is {got:?} but {flow} needs {expected:?}")]
    PackDim {
        flow: FlowKind,
        expected: PackDim,
        got: PackDim,
    },
    #[error("invalid hardware configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pmul(#[from] PmulError),
    #[error(transparent)]
    Overflow(#[from] WideOverflow),
}

/// GEMM problem size: `C[m x n] = A[m x k] * B[k x n]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl GemmShape {
    pub fn new(m: usize, n: usize, k: usize) -> Result<Self, DataflowError> {
        for (name, v) in [("m", m), ("n", n), ("k", k)] {
            if v == 0 || v % WARP_TILE != 0 {
                return Err(DataflowError::Shape(format!(
                    "{name}={v} must be a positive multiple of {WARP_TILE}"
                )));
            }
        }
        Ok(GemmShape { m, n, k })
    }

    /// Warp instructions along (m, n, k).
    pub fn warp_grid(&self) -> (usize, usize, usize) {
        (self.m / WARP_TILE, self.n / WARP_TILE, self.k / WARP_TILE)
    }

    pub fn warp_instructions(&self) -> usize {
        let (a, b, c) = self.warp_grid();
        a * b * c
    }

    pub fn macs(&self) -> u64 {
        (self.m * self.n * self.k) as u64
    }
}

impl fmt::Display for GemmShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}n{}k{}", self.m, self.n, self.k)
    }
}

impl FromStr for GemmShape {
    type Err = DataflowError;

    /// Parses `MxNxK`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let dims: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
        match dims.as_deref() {
            Some(&[m, n, k]) => GemmShape::new(m, n, k),
            _ => Err(DataflowError::Shape(format!("expected MxNxK, got {s:?}"))),
        }
    }
}

/// The three GEMM flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlowKind {
    /// Weights materialized as FP16 before a W16A16 GEMM. `Packed` weights
    /// are unpacked and dequantized on the general cores first.
    DequantStandard(WeightMode),
    /// Containers packed along k, consumed by the baseline multiplier.
    KPacked(BitWidth),
    /// Containers packed along n, consumed by the parallel multiplier.
    NPackedPacq(BitWidth),
}

impl FlowKind {
    /// `name` is one of `dequant`, `kpack`, `npack`; `bits` is 16, 4 or 2.
    pub fn from_parts(name: &str, bits: u32) -> Result<Self, DataflowError> {
        let mode = WeightMode::from_bits(bits)
            .ok_or_else(|| DataflowError::Config(format!("unsupported weight bits {bits}")))?;
        let packed = |mode| match mode {
            WeightMode::Packed(b) => Ok(b),
            WeightMode::Fp16 => Err(DataflowError::Config(format!("flow {name} needs 4- or 2-bit weights"))),
        };
        match name {
            "dequant" => Ok(FlowKind::DequantStandard(mode)),
            "kpack" => Ok(FlowKind::KPacked(packed(mode)?)),
            "npack" => Ok(FlowKind::NPackedPacq(packed(mode)?)),
            other => Err(DataflowError::Config(format!("unknown flow {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FlowKind::DequantStandard(_) => "dequant",
            FlowKind::KPacked(_) => "kpack",
            FlowKind::NPackedPacq(_) => "npack",
        }
    }

    pub fn weight_bits(&self) -> u32 {
        match *self {
            FlowKind::DequantStandard(mode) => mode.bits(),
            FlowKind::KPacked(b) | FlowKind::NPackedPacq(b) => b.bits(),
        }
    }

    /// Quantized weight width, if the flow starts from quantized weights.
    pub fn quant_bits(&self) -> Option<BitWidth> {
        match *self {
            FlowKind::DequantStandard(WeightMode::Fp16) => None,
            FlowKind::DequantStandard(WeightMode::Packed(b)) | FlowKind::KPacked(b) | FlowKind::NPackedPacq(b) => {
                Some(b)
            }
        }
    }

    pub fn pack_dim(&self) -> Option<PackDim> {
        match self {
            FlowKind::DequantStandard(_) => None,
            FlowKind::KPacked(_) => Some(PackDim::K),
            FlowKind::NPackedPacq(_) => Some(PackDim::N),
        }
    }

    /// Mode of the multiplier inside the tensor core.
    pub fn unit_mode(&self) -> WeightMode {
        match *self {
            FlowKind::NPackedPacq(b) => WeightMode::Packed(b),
            _ => WeightMode::Fp16,
        }
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-w{}", self.name(), self.weight_bits())
    }
}

/// Order of warp instructions over the output grid. k is always outermost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridOrder {
    #[default]
    NInner,
    MInner,
}

/// Tensor-core parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HwConfig {
    pub dp: DpConfig,
    pub accumulator: AccumulatorPolicy,
    /// Register width used for RF accounting.
    pub register_bits: u32,
    /// Capacity of each operand buffer.
    pub buffer_bits: u32,
    /// A tiles each per-DP buffer holds at once.
    pub a_buffer_tiles: usize,
    pub simt_width: u32,
    /// General-core instructions to unpack and dequantize one weight.
    pub unpack_cost_per_element: u32,
    /// Cycles lost per A-buffer eviction; 0 models full double buffering.
    pub eviction_stall_cycles: u64,
    pub grid_order: GridOrder,
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig {
            dp: DpConfig::default(),
            accumulator: AccumulatorPolicy::WideExact,
            register_bits: 32,
            buffer_bits: 3072,
            a_buffer_tiles: 1,
            simt_width: 32,
            unpack_cost_per_element: 1,
            eviction_stall_cycles: 0,
            grid_order: GridOrder::NInner,
        }
    }
}

impl HwConfig {
    pub fn validate(&self, flow: FlowKind) -> Result<(), DataflowError> {
        self.dp.validate(flow.unit_mode())?;
        if let Some(b) = flow.quant_bits() {
            // the duplicated adder trees are part of the unit regardless of flow
            self.dp.validate(WeightMode::Packed(b))?;
        }
        if !WARP_TILE.is_multiple_of(self.dp.dp_width) {
            return Err(DataflowError::Config(format!(
                "dp_width {} does not divide {WARP_TILE}",
                self.dp.dp_width
            )));
        }
        if self.register_bits == 0 || !self.register_bits.is_multiple_of(16) {
            return Err(DataflowError::Config(
                "register_bits must be a positive multiple of 16".into(),
            ));
        }
        if self.a_buffer_tiles == 0 || self.simt_width == 0 {
            return Err(DataflowError::Config(
                "a_buffer_tiles and simt_width must be positive".into(),
            ));
        }
        let b_tile_bits = (self.dp.dp_width * TILE_COLS * 16) as u32;
        let a_tile_bits = (OCTET_ROWS * self.dp.dp_width * 16) as u32 * self.a_buffer_tiles as u32;
        if b_tile_bits > self.buffer_bits || a_tile_bits > self.buffer_bits {
            return Err(DataflowError::Config(format!(
                "tiles of {b_tile_bits}/{a_tile_bits} bits exceed the {}-bit buffer",
                self.buffer_bits
            )));
        }
        Ok(())
    }

    fn regs(&self, elems16: usize) -> u64 {
        ((elems16 * 16) as u64).div_ceil(self.register_bits as u64)
    }
}

/// One warp instruction of the outer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WarpInstr {
    pub index: usize,
    pub mb: usize,
    pub nb: usize,
    pub kb: usize,
}

/// Output region of one DP unit inside a warp instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DpAssignment {
    pub dp: usize,
    pub row0: usize,
    pub rows: usize,
}

/// Output region and DP units of one octet inside a warp instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OctetAssignment {
    pub octet: usize,
    pub row0: usize,
    pub rows: usize,
    /// Origins of the octet's 4x4 C tiles, `(row, col)`.
    pub c_tiles: Vec<(usize, usize)>,
    pub dps: [DpAssignment; DPS_PER_OCTET],
}

/// Octet layout of one warp instruction plus the outer-grid order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub octets: Vec<OctetAssignment>,
    pub instrs: Vec<WarpInstr>,
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }
}

pub fn octet_map() -> Vec<OctetAssignment> {
    (0..OCTETS)
        .map(|o| {
            let row0 = o * OCTET_ROWS;
            OctetAssignment {
                octet: o,
                row0,
                rows: OCTET_ROWS,
                c_tiles: (0..WARP_TILE / TILE_COLS).map(|t| (row0, t * TILE_COLS)).collect(),
                dps: std::array::from_fn(|d| DpAssignment {
                    dp: d,
                    row0: row0 + d * DP_ROWS,
                    rows: DP_ROWS,
                }),
            }
        })
        .collect()
}

/// Octet layout and warp-instruction order for `shape`.
pub fn map_warp(shape: GemmShape, order: GridOrder) -> Schedule {
    let (mbs, nbs, kbs) = shape.warp_grid();
    let mut instrs = Vec::with_capacity(mbs * nbs * kbs);
    for kb in 0..kbs {
        match order {
            GridOrder::NInner => {
                for mb in 0..mbs {
                    for nb in 0..nbs {
                        instrs.push(WarpInstr {
                            index: instrs.len(),
                            mb,
                            nb,
                            kb,
                        });
                    }
                }
            }
            GridOrder::MInner => {
                for nb in 0..nbs {
                    for mb in 0..mbs {
                        instrs.push(WarpInstr {
                            index: instrs.len(),
                            mb,
                            nb,
                            kb,
                        });
                    }
                }
            }
        }
    }
    Schedule {
        octets: octet_map(),
        instrs,
    }
}

/// A tile identity: `len` k positions starting at `k0` with stride `stride`,
/// relative to the warp instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ATile {
    pub k0: u32,
    pub stride: u32,
    pub len: u32,
}

/// Tile-level event inside one warp instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    FetchA {
        octet: u8,
        tile: ATile,
        regs: u64,
    },
    EvictA {
        octet: u8,
        tile: ATile,
    },
    FetchB {
        octet: u8,
        k0: u32,
        n0: u32,
        rows: u32,
        cols: u32,
        regs: u64,
    },
    /// One dot-product issue: `elems` multiplier operations, each producing
    /// `lanes` products.
    DpIssue {
        octet: u8,
        dp: u8,
        elems: u32,
        lanes: u32,
    },
    CRead {
        octet: u8,
        regs: u64,
    },
    CWrite {
        octet: u8,
        regs: u64,
    },
}

enum Step {
    NeedA(ATile),
    LoadB {
        k0: usize,
        n0: usize,
        rows: usize,
        cols: usize,
    },
    Issue {
        dp: usize,
        elems: usize,
        lanes: usize,
    },
    ReadC(usize),
    WriteC(usize),
}

fn octet_steps(flow: FlowKind, w: usize, first_kblock: bool) -> Vec<Step> {
    let mut s = Vec::new();
    let c_read = |s: &mut Vec<Step>, later: bool, halves: usize| {
        if later || !first_kblock {
            s.push(Step::ReadC(halves));
        }
    };
    let c_tile = OCTET_ROWS * TILE_COLS;
    match flow {
        FlowKind::DequantStandard(_) => {
            for kt in 0..WARP_TILE / w {
                for nt in 0..WARP_TILE / TILE_COLS {
                    s.push(Step::NeedA(ATile {
                        k0: (kt * w) as u32,
                        stride: 1,
                        len: w as u32,
                    }));
                    s.push(Step::LoadB {
                        k0: kt * w,
                        n0: nt * TILE_COLS,
                        rows: w,
                        cols: TILE_COLS,
                    });
                    c_read(&mut s, kt > 0, c_tile);
                    for dp in 0..DPS_PER_OCTET {
                        for _ in 0..DP_ROWS * TILE_COLS {
                            s.push(Step::Issue { dp, elems: w, lanes: 1 });
                        }
                    }
                    s.push(Step::WriteC(c_tile));
                }
            }
        }
        FlowKind::KPacked(bits) => {
            let lanes = bits.lanes();
            let crows = WARP_TILE / lanes;
            for ktc in 0..crows.div_ceil(w) {
                let rows = w.min(crows - ktc * w);
                let kbase = ktc * w * lanes;
                for nt in 0..WARP_TILE / TILE_COLS {
                    s.push(Step::LoadB {
                        k0: kbase,
                        n0: nt * TILE_COLS,
                        rows,
                        cols: TILE_COLS,
                    });
                    c_read(&mut s, ktc > 0, c_tile);
                    for j in 0..lanes {
                        s.push(Step::NeedA(ATile {
                            k0: (kbase + j) as u32,
                            stride: lanes as u32,
                            len: rows as u32,
                        }));
                        for dp in 0..DPS_PER_OCTET {
                            for _ in 0..DP_ROWS * TILE_COLS {
                                s.push(Step::Issue {
                                    dp,
                                    elems: rows,
                                    lanes: 1,
                                });
                            }
                        }
                    }
                    s.push(Step::WriteC(c_tile));
                }
            }
        }
        FlowKind::NPackedPacq(bits) => {
            let lanes = bits.lanes();
            let ccols = WARP_TILE / lanes;
            for ntc in 0..ccols.div_ceil(TILE_COLS) {
                let cols = TILE_COLS.min(ccols - ntc * TILE_COLS);
                let halves = OCTET_ROWS * cols * lanes;
                c_read(&mut s, false, halves);
                for kt in 0..WARP_TILE / w {
                    s.push(Step::NeedA(ATile {
                        k0: (kt * w) as u32,
                        stride: 1,
                        len: w as u32,
                    }));
                    s.push(Step::LoadB {
                        k0: kt * w,
                        n0: ntc * TILE_COLS * lanes,
                        rows: w,
                        cols,
                    });
                    for dp in 0..DPS_PER_OCTET {
                        for _ in 0..DP_ROWS * cols {
                            s.push(Step::Issue { dp, elems: w, lanes });
                        }
                    }
                }
                s.push(Step::WriteC(halves));
            }
        }
    }
    s
}

/// Emits the events of one octet in one warp instruction. `first_kblock`
/// marks instructions whose C starts at zero.
pub fn octet_events(flow: FlowKind, hw: &HwConfig, octet: usize, first_kblock: bool, mut sink: impl FnMut(Event)) {
    let steps = octet_steps(flow, hw.dp.dp_width, first_kblock);
    let requests: Vec<ATile> = steps
        .iter()
        .filter_map(|s| match s {
            Step::NeedA(t) => Some(*t),
            _ => None,
        })
        .collect();
    // direct-mapped buffer, slot chosen by first-seen order
    let mut ids: Vec<ATile> = Vec::new();
    let mut slots: Vec<Option<ATile>> = vec![None; hw.a_buffer_tiles];
    let mut next_request = 0;
    let o = octet as u8;
    for step in &steps {
        match *step {
            Step::NeedA(tile) => {
                next_request += 1;
                let id = ids.iter().position(|t| *t == tile).unwrap_or_else(|| {
                    ids.push(tile);
                    ids.len() - 1
                });
                let slot = &mut slots[id % hw.a_buffer_tiles];
                if *slot == Some(tile) {
                    continue;
                }
                if let Some(old) = *slot {
                    if requests[next_request..].contains(&old) {
                        sink(Event::EvictA { octet: o, tile: old });
                    }
                }
                *slot = Some(tile);
                sink(Event::FetchA {
                    octet: o,
                    tile,
                    regs: hw.regs(OCTET_ROWS * tile.len as usize),
                });
            }
            Step::LoadB { k0, n0, rows, cols } => sink(Event::FetchB {
                octet: o,
                k0: k0 as u32,
                n0: n0 as u32,
                rows: rows as u32,
                cols: cols as u32,
                regs: hw.regs(rows * cols),
            }),
            Step::Issue { dp, elems, lanes } => sink(Event::DpIssue {
                octet: o,
                dp: dp as u8,
                elems: elems as u32,
                lanes: lanes as u32,
            }),
            Step::ReadC(halves) => sink(Event::CRead {
                octet: o,
                regs: hw.regs(halves),
            }),
            Step::WriteC(halves) => sink(Event::CWrite {
                octet: o,
                regs: hw.regs(halves),
            }),
        }
    }
}

/// Event and cycle counts of a simulated GEMM.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCounters {
    /// 32-bit register reads of activation tiles.
    pub rf_reads_a: u64,
    /// 32-bit register reads of weight tiles.
    pub rf_reads_b: u64,
    pub rf_reads_c: u64,
    pub rf_writes_c: u64,
    pub fetch_instructions_a: u64,
    pub fetch_instructions_b: u64,
    /// A tiles replaced while still needed later.
    pub buffer_evictions: u64,
    /// Operand reads from tensor-core buffers by the multipliers.
    pub buffer_accesses: u64,
    pub dp_issues: u64,
    /// Baseline FP16 multiplies.
    pub fp16_mults: u64,
    /// Parallel multiplier issues, each producing one product per lane.
    pub parallel_mul_issues: u64,
    /// Adder-tree, accumulation and activation-sum additions.
    pub fp16_adds: u64,
    /// Unpack/dequantize and offset-correction instructions on the general
    /// cores.
    pub general_core_ops: u64,
    /// 32-bit L1/shared-memory accesses for operand staging.
    pub l1_accesses: u64,
    pub scale_fetches: u64,
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub unpack_cycles: u64,
    pub cycles: u64,
}

impl FlowCounters {
    pub fn fetch_instructions(&self) -> u64 {
        self.fetch_instructions_a + self.fetch_instructions_b
    }

    pub fn rf_total(&self) -> u64 {
        self.rf_total_without_c() + self.rf_reads_c + self.rf_writes_c
    }

    pub fn rf_total_without_c(&self) -> u64 {
        self.rf_reads_a + self.rf_reads_b
    }

    pub fn record(&mut self, e: Event) {
        match e {
            Event::FetchA { regs, .. } => {
                self.rf_reads_a += regs;
                self.fetch_instructions_a += 1;
            }
            Event::EvictA { .. } => self.buffer_evictions += 1,
            Event::FetchB { regs, .. } => {
                self.rf_reads_b += regs;
                self.fetch_instructions_b += 1;
            }
            Event::DpIssue { elems, lanes, .. } => {
                let (elems, lanes) = (elems as u64, lanes as u64);
                self.dp_issues += 1;
                self.buffer_accesses += 2 * elems;
                if lanes == 1 {
                    self.fp16_mults += elems;
                    self.fp16_adds += elems;
                } else {
                    self.parallel_mul_issues += elems;
                    // per-lane trees plus the activation-sum accumulator
                    self.fp16_adds += lanes * elems + elems;
                }
            }
            Event::CRead { regs, .. } => self.rf_reads_c += regs,
            Event::CWrite { regs, .. } => self.rf_writes_c += regs,
        }
    }

    /// Every field multiplied by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        let mut out = *self;
        for (dst, src) in out.fields_mut().into_iter().zip(self.fields()) {
            *dst = src * k;
        }
        out
    }

    /// Field names and values in declaration order.
    pub fn named_fields(&self) -> [(&'static str, u64); 19] {
        let f = self.fields();
        let names = Self::FIELD_NAMES;
        std::array::from_fn(|i| (names[i], f[i]))
    }

    pub const FIELD_NAMES: [&'static str; 19] = [
        "rf_reads_a",
        "rf_reads_b",
        "rf_reads_c",
        "rf_writes_c",
        "fetch_instructions_a",
        "fetch_instructions_b",
        "buffer_evictions",
        "buffer_accesses",
        "dp_issues",
        "fp16_mults",
        "parallel_mul_issues",
        "fp16_adds",
        "general_core_ops",
        "l1_accesses",
        "scale_fetches",
        "compute_cycles",
        "stall_cycles",
        "unpack_cycles",
        "cycles",
    ];

    fn fields(&self) -> [u64; 19] {
        [
            self.rf_reads_a,
            self.rf_reads_b,
            self.rf_reads_c,
            self.rf_writes_c,
            self.fetch_instructions_a,
            self.fetch_instructions_b,
            self.buffer_evictions,
            self.buffer_accesses,
            self.dp_issues,
            self.fp16_mults,
            self.parallel_mul_issues,
            self.fp16_adds,
            self.general_core_ops,
            self.l1_accesses,
            self.scale_fetches,
            self.compute_cycles,
            self.stall_cycles,
            self.unpack_cycles,
            self.cycles,
        ]
    }

    fn fields_mut(&mut self) -> [&mut u64; 19] {
        [
            &mut self.rf_reads_a,
            &mut self.rf_reads_b,
            &mut self.rf_reads_c,
            &mut self.rf_writes_c,
            &mut self.fetch_instructions_a,
            &mut self.fetch_instructions_b,
            &mut self.buffer_evictions,
            &mut self.buffer_accesses,
            &mut self.dp_issues,
            &mut self.fp16_mults,
            &mut self.parallel_mul_issues,
            &mut self.fp16_adds,
            &mut self.general_core_ops,
            &mut self.l1_accesses,
            &mut self.scale_fetches,
            &mut self.compute_cycles,
            &mut self.stall_cycles,
            &mut self.unpack_cycles,
            &mut self.cycles,
        ]
    }
}

impl AddAssign for FlowCounters {
    fn add_assign(&mut self, rhs: Self) {
        for (dst, src) in self.fields_mut().into_iter().zip(rhs.fields()) {
            *dst += src;
        }
    }
}

impl Add for FlowCounters {
    type Output = FlowCounters;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

/// Cycles one octet spends on a warp instruction, before stalls.
pub fn warp_compute_cycles(flow: FlowKind, dp: &DpConfig) -> u64 {
    let mode = flow.unit_mode();
    let units = WARP_TILE / mode.products_per_cycle();
    dp_cycles(UnitShape::new(DP_ROWS, units, WARP_TILE), mode, dp)
}

/// Counters of one warp instruction summed over its octets.
pub fn warp_counters(flow: FlowKind, hw: &HwConfig, first_kblock: bool) -> FlowCounters {
    let mut c = FlowCounters::default();
    let mut max_evictions = 0;
    for o in 0..OCTETS {
        let mut oc = FlowCounters::default();
        octet_events(flow, hw, o, first_kblock, |e| oc.record(e));
        max_evictions = max_evictions.max(oc.buffer_evictions);
        c += oc;
    }
    c.compute_cycles = warp_compute_cycles(flow, &hw.dp);
    c.stall_cycles = max_evictions * hw.eviction_stall_cycles;
    c.cycles = c.compute_cycles + c.stall_cycles;
    c
}

fn check_group(flow: FlowKind, shape: GemmShape, group: GroupSpec, hw: &HwConfig) -> Result<(), DataflowError> {
    group.check(shape.k, shape.n)?;
    if flow.pack_dim().is_some() && !group.gk.is_multiple_of(hw.dp.dp_width) {
        return Err(DataflowError::Config(format!(
            "group height {} is not a multiple of dp_width {}",
            group.gk, hw.dp.dp_width
        )));
    }
    Ok(())
}

/// Counters for a whole GEMM without computing any values. `group` is the
/// quantization group of the weights; it is ignored for native FP16 weights.
pub fn simulate_counters(
    shape: GemmShape,
    flow: FlowKind,
    hw: &HwConfig,
    group: GroupSpec,
) -> Result<FlowCounters, DataflowError> {
    hw.validate(flow)?;
    if flow.quant_bits().is_some() {
        check_group(flow, shape, group, hw)?;
    }
    let (mbs, nbs, kbs) = shape.warp_grid();
    let per_k = (mbs * nbs) as u64;
    let mut c = warp_counters(flow, hw, true).scaled(per_k);
    if kbs > 1 {
        c += warp_counters(flow, hw, false).scaled(per_k * (kbs as u64 - 1));
    }

    let (m, n, k) = (shape.m as u64, shape.n as u64, shape.k as u64);
    let warps = shape.warp_instructions() as u64;
    let tile = (WARP_TILE * WARP_TILE) as u64;
    let a_words = tile * 16 / hw.register_bits as u64;
    match flow {
        FlowKind::DequantStandard(mode) => {
            c.l1_accesses += warps * 2 * a_words;
            if let WeightMode::Packed(b) = mode {
                let elems = k * n * hw.unpack_cost_per_element as u64;
                c.general_core_ops += elems;
                c.unpack_cycles = elems.div_ceil(hw.simt_width as u64);
                // packed read, FP16 store, staging read of the FP16 copy
                let packed_words = (k * n * b.bits() as u64).div_ceil(hw.register_bits as u64);
                c.l1_accesses += packed_words + k * n * 16 / hw.register_bits as u64;
                let (gr, gc) = group.grid(shape.k, shape.n);
                c.scale_fetches += (gr * gc) as u64;
            }
        }
        FlowKind::KPacked(b) | FlowKind::NPackedPacq(b) => {
            let b_words = tile * b.bits() as u64 / hw.register_bits as u64;
            c.l1_accesses += warps * (a_words + b_words);
            let groups_k = k / group.gk as u64;
            // offset multiply, subtract, scale, then one add per extra group
            c.general_core_ops += m * n * (4 * groups_k - 1);
            c.scale_fetches += (m / WARP_TILE as u64) * groups_k * (n / group.gn as u64);
        }
    }
    c.cycles += c.unpack_cycles;
    Ok(c)
}

/// Weight operand of a functional simulation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    /// FP16 weights for the dequant flow, with the group they were
    /// quantized with (for counting scale traffic).
    Half {
        b: &'a Matrix<HalfBits>,
        group: GroupSpec,
    },
    Packed(&'a PackedWeights),
}

/// Result of a functional simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimOutput {
    pub c: Matrix<HalfBits>,
    pub counters: FlowCounters,
    pub flags: Flags,
}

/// Runs `flow` on real operands: the output C plus the counters of
/// [`simulate_counters`].
///
/// Packed flows accumulate `sum(A * (q + offset))` and `sum(A)` per
/// quantization group and remove the offset with [`fused_correct`]; the
/// dequant flow accumulates `A * B` directly. Accumulation runs in ascending
/// k under `hw.accumulator`.
pub fn simulate(
    shape: GemmShape,
    flow: FlowKind,
    hw: &HwConfig,
    a: &Matrix<HalfBits>,
    b: Operand<'_>,
) -> Result<SimOutput, DataflowError> {
    if a.shape() != (shape.m, shape.k) {
        return Err(DataflowError::Shape(format!(
            "A is {:?}, expected {}x{}",
            a.shape(),
            shape.m,
            shape.k
        )));
    }
    let check_b = |k: usize, n: usize| {
        if (k, n) != (shape.k, shape.n) {
            Err(DataflowError::Shape(format!(
                "B is {k}x{n}, expected {}x{}",
                shape.k, shape.n
            )))
        } else {
            Ok(())
        }
    };
    let (c, flags, group) = match (flow, b) {
        (FlowKind::DequantStandard(_), Operand::Half { b, group }) => {
            check_b(b.rows(), b.cols())?;
            let (c, f) = half_gemm(a, b, hw.accumulator)?;
            (c, f, group)
        }
        (FlowKind::KPacked(bits) | FlowKind::NPackedPacq(bits), Operand::Packed(p)) => {
            check_b(p.k(), p.n())?;
            let expected = flow.pack_dim().expect("packed flow");
            if p.packed.spec.dim != expected {
                return Err(DataflowError::PackDim {
                    flow,
                    expected,
                    got: p.packed.spec.dim,
                });
            }
            if p.bits() != bits {
                return Err(DataflowError::Operand {
                    flow,
                    expected: "weights of the same bit width",
                });
            }
            check_group(flow, shape, p.group, hw)?;
            let (c, f) = match flow {
                FlowKind::NPackedPacq(_) => npacked_gemm(a, p, hw)?,
                _ => kpacked_gemm(a, p, hw)?,
            };
            (c, f, p.group)
        }
        (FlowKind::DequantStandard(_), _) => {
            return Err(DataflowError::Operand {
                flow,
                expected: "FP16 weights",
            })
        }
        _ => {
            return Err(DataflowError::Operand {
                flow,
                expected: "packed weights",
            })
        }
    };
    let counters = simulate_counters(shape, flow, hw, group)?;
    Ok(SimOutput { c, counters, flags })
}

/// Dequantizes `q` when the flow needs FP16 weights, packs it otherwise, and
/// runs [`simulate`].
pub fn simulate_quantized(
    shape: GemmShape,
    flow: FlowKind,
    hw: &HwConfig,
    a: &Matrix<HalfBits>,
    q: &QuantizedWeights,
) -> Result<SimOutput, DataflowError> {
    match flow.pack_dim() {
        None => {
            let b = crate::quantpack::dequantize(q);
            simulate(shape, flow, hw, a, Operand::Half { b: &b, group: q.group })
        }
        Some(dim) => {
            let p = PackedWeights::from_quantized(q, dim)?;
            simulate(shape, flow, hw, a, Operand::Packed(&p))
        }
    }
}

fn half_gemm(
    a: &Matrix<HalfBits>,
    b: &Matrix<HalfBits>,
    policy: AccumulatorPolicy,
) -> Result<(Matrix<HalfBits>, Flags), DataflowError> {
    let mut flags = Flags::NONE;
    let mut c = Matrix::filled(a.rows(), b.cols(), HalfBits::ZERO);
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = PartialSum::zero(policy);
            for kk in 0..a.cols() {
                let (x, y) = (a[(i, kk)], b[(kk, j)]);
                let p = fp16_mul(x, y);
                flags |= p.flags;
                let exact = match (Wide::from_half(x), Wide::from_half(y)) {
                    (Some(wx), Some(wy)) => wx.checked_mul(wy)?,
                    _ => Wide::ZERO, // only reached by the FP16 policy, which ignores it
                };
                if policy == AccumulatorPolicy::WideExact && !(x.is_finite() && y.is_finite()) {
                    return Err(PmulError::UnsupportedActivation(x, x.class()).into());
                }
                flags |= acc.add(exact, p.value)?;
            }
            c[(i, j)] = acc.to_half();
        }
    }
    Ok((c, flags))
}

/// Running sum of corrected group results.
struct GroupSum {
    acc: PartialSum,
    flags: Flags,
}

impl GroupSum {
    fn new(policy: AccumulatorPolicy) -> Self {
        GroupSum {
            acc: PartialSum::zero(policy),
            flags: Flags::NONE,
        }
    }

    fn add(
        &mut self,
        sum_ab: PartialSum,
        sum_a: PartialSum,
        scale: HalfBits,
        bits: BitWidth,
    ) -> Result<(), DataflowError> {
        let corr = fused_correct(sum_ab, sum_a, scale, bits)?;
        self.flags |= corr.flags;
        self.flags |= self.acc.add(corr.exact.unwrap_or(Wide::ZERO), corr.value)?;
        Ok(())
    }
}

fn npacked_gemm(
    a: &Matrix<HalfBits>,
    p: &PackedWeights,
    hw: &HwConfig,
) -> Result<(Matrix<HalfBits>, Flags), DataflowError> {
    let bits = p.bits();
    let lanes = bits.lanes();
    let (m, k, n) = (a.rows(), p.k(), p.n());
    let gk = p.group.gk;
    let words = &p.packed.words;
    let mut flags = Flags::NONE;
    let mut c = Matrix::filled(m, n, HalfBits::ZERO);
    for i in 0..m {
        for cc in 0..words.cols() {
            let mut sums: Vec<GroupSum> = (0..lanes).map(|_| GroupSum::new(hw.accumulator)).collect();
            for g0 in (0..k).step_by(gk) {
                let mut dp = DpAccumulator::new(bits, hw.accumulator);
                for kk in g0..g0 + gk {
                    dp.push(a[(i, kk)], words[(kk, cc)])?;
                }
                let r = dp.finish();
                flags |= r.flags;
                for (j, s) in sums.iter_mut().enumerate() {
                    s.add(r.lane_sums[j], r.sum_a, p.scale_at(g0, cc * lanes + j), bits)?;
                }
            }
            for (j, s) in sums.into_iter().enumerate() {
                flags |= s.flags;
                c[(i, cc * lanes + j)] = s.acc.to_half();
            }
        }
    }
    Ok((c, flags))
}

fn kpacked_gemm(
    a: &Matrix<HalfBits>,
    p: &PackedWeights,
    hw: &HwConfig,
) -> Result<(Matrix<HalfBits>, Flags), DataflowError> {
    let bits = p.bits();
    let (m, k, n) = (a.rows(), p.k(), p.n());
    let gk = p.group.gk;
    let offset = bits.fp_offset() as i64;
    let mut flags = Flags::NONE;
    let mut c = Matrix::filled(m, n, HalfBits::ZERO);
    for i in 0..m {
        for j in 0..n {
            let mut total = GroupSum::new(hw.accumulator);
            for g0 in (0..k).step_by(gk) {
                let mut sum_ab = PartialSum::zero(hw.accumulator);
                let mut sum_a = PartialSum::zero(hw.accumulator);
                for kk in g0..g0 + gk {
                    let x = a[(i, kk)];
                    let xw = Wide::from_half(x).ok_or(PmulError::UnsupportedActivation(x, x.class()))?;
                    let w = BiasedWeight::new(p.packed.value(kk, j) as i32, bits)?;
                    let biased = w.field() as i64 - bits.bias() as i64 + offset;
                    let prod = fp16_mul(x, w.to_half());
                    flags |= prod.flags;
                    flags |= sum_ab.add(xw.checked_mul_int(biased)?, prod.value)?;
                    flags |= sum_a.add(xw, x)?;
                }
                total.add(sum_ab, sum_a, p.scale_at(g0, j), bits)?;
            }
            flags |= total.flags;
            c[(i, j)] = total.acc.to_half();
        }
    }
    Ok((c, flags))
}

/// Exact GEMM against integer weights and group scales, rounded once.
pub fn exact_quantized_gemm(a: &Matrix<HalfBits>, q: &QuantizedWeights) -> Result<Matrix<HalfBits>, DataflowError> {
    let mut c = Matrix::filled(a.rows(), q.n(), HalfBits::ZERO);
    for i in 0..a.rows() {
        for j in 0..q.n() {
            let mut acc = Wide::ZERO;
            for kk in 0..q.k() {
                let x = a[(i, kk)];
                let xw = Wide::from_half(x).ok_or(PmulError::UnsupportedActivation(x, x.class()))?;
                let s = Wide::from_half(q.scale_at(kk, j)).expect("scales are finite");
                acc = acc.checked_add(xw.checked_mul(s)?.checked_mul_int(q.values[(kk, j)] as i64)?)?;
            }
            c[(i, j)] = acc.to_half().value;
        }
    }
    Ok(c)
}

/// Exact GEMM of FP16 operands, rounded once.
pub fn exact_half_gemm(a: &Matrix<HalfBits>, b: &Matrix<HalfBits>) -> Result<Matrix<HalfBits>, DataflowError> {
    Ok(half_gemm(a, b, AccumulatorPolicy::WideExact)?.0)
}

/// Counters of every flow at one shape, with ratios against the dequant
/// baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowComparison {
    pub shape: GemmShape,
    pub rows: Vec<FlowRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRow {
    pub flow: FlowKind,
    pub counters: FlowCounters,
    pub rf_ratio: f64,
    pub rf_ratio_without_c: f64,
    pub cycle_ratio: f64,
    pub fetch_ratio: f64,
}

impl FlowComparison {
    pub fn get(&self, flow: FlowKind) -> Option<&FlowCounters> {
        self.rows.iter().find(|r| r.flow == flow).map(|r| &r.counters)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

/// Compares `flows` at one shape. The first flow is the normalization
/// baseline.
pub fn compare_flows(
    shape: GemmShape,
    hw: &HwConfig,
    group: GroupSpec,
    flows: &[FlowKind],
) -> Result<FlowComparison, DataflowError> {
    let counters: Vec<FlowCounters> = flows
        .iter()
        .map(|&f| simulate_counters(shape, f, hw, group))
        .collect::<Result<_, _>>()?;
    let base = counters.first().copied().unwrap_or_default();
    let rows = flows
        .iter()
        .zip(&counters)
        .map(|(&flow, c)| FlowRow {
            flow,
            counters: *c,
            rf_ratio: ratio(c.rf_total(), base.rf_total()),
            rf_ratio_without_c: ratio(c.rf_total_without_c(), base.rf_total_without_c()),
            cycle_ratio: ratio(c.cycles, base.cycles),
            fetch_ratio: ratio(c.fetch_instructions(), base.fetch_instructions()),
        })
        .collect();
    Ok(FlowComparison { shape, rows })
}

/// The dequant baseline, the k-packed flow and the n-packed flow at `bits`.
pub fn standard_flows(bits: BitWidth) -> [FlowKind; 3] {
    [
        FlowKind::DequantStandard(WeightMode::Packed(bits)),
        FlowKind::KPacked(bits),
        FlowKind::NPackedPacq(bits),
    ]
}

/// Writes the event log of a whole GEMM.
///
/// ```text
/// # pacq-trace v1 flow=npack-w4 shape=m16n16k16 dp=4 dup=2 rounding=rne
/// FETCH_A warp=0 octet=0 k=0 stride=1 len=4 regs=8
/// FETCH_B warp=0 octet=0 k=0 n=0 rows=4 cols=4 regs=8
/// DP_ISSUE warp=0 octet=0 dp=0 elems=4 lanes=4
/// EVICT_A warp=0 octet=0 k=3 stride=4 len=4
/// C_READ warp=1 octet=0 regs=32
/// C_WRITE warp=0 octet=0 regs=32
/// ```
///
/// `k` and `n` are relative to the warp instruction, whose origin is given
/// by a `WARP` line.
pub fn write_trace(out: &mut impl Write, shape: GemmShape, flow: FlowKind, hw: &HwConfig) -> io::Result<()> {
    writeln!(
        out,
        "# pacq-trace v1 flow={flow} shape={shape} dp={} dup={} rounding=rne",
        hw.dp.dp_width, hw.dp.dup_factor
    )?;
    let sched = map_warp(shape, hw.grid_order);
    let mut events = Vec::new();
    for wi in &sched.instrs {
        writeln!(
            out,
            "WARP warp={} m={} n={} k={}",
            wi.index,
            wi.mb * WARP_TILE,
            wi.nb * WARP_TILE,
            wi.kb * WARP_TILE
        )?;
        for o in 0..OCTETS {
            events.clear();
            octet_events(flow, hw, o, wi.kb == 0, |e| events.push(e));
            for &e in &events {
                write_event(out, wi.index, e)?;
            }
        }
    }
    Ok(())
}

fn write_event(out: &mut impl Write, warp: usize, e: Event) -> io::Result<()> {
    match e {
        Event::FetchA { octet, tile, regs } => writeln!(
            out,
            "FETCH_A warp={warp} octet={octet} k={} stride={} len={} regs={regs}",
            tile.k0, tile.stride, tile.len
        ),
        Event::EvictA { octet, tile } => writeln!(
            out,
            "EVICT_A warp={warp} octet={octet} k={} stride={} len={}",
            tile.k0, tile.stride, tile.len
        ),
        Event::FetchB {
            octet,
            k0,
            n0,
            rows,
            cols,
            regs,
        } => writeln!(
            out,
            "FETCH_B warp={warp} octet={octet} k={k0} n={n0} rows={rows} cols={cols} regs={regs}"
        ),
        Event::DpIssue {
            octet,
            dp,
            elems,
            lanes,
        } => {
            writeln!(
                out,
                "DP_ISSUE warp={warp} octet={octet} dp={dp} elems={elems} lanes={lanes}"
            )
        }
        Event::CRead { octet, regs } => writeln!(out, "C_READ warp={warp} octet={octet} regs={regs}"),
        Event::CWrite { octet, regs } => writeln!(out, "C_WRITE warp={warp} octet={octet} regs={regs}"),
    }
}
