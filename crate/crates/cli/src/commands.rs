//! Command implementations. Each returns a [`Table`] and, for verification
//! commands, whether the check passed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use pacq_core::costmodel::{edp_report, evaluate, EdpReport};
use pacq_core::dataflow::{
    exact_half_gemm, exact_quantized_gemm, simulate, simulate_counters, write_trace, FlowCounters, FlowKind, GemmShape,
    Operand,
};
use pacq_core::pmul::{verify_exhaustive, AccumulatorPolicy, DpConfig, WeightMode};
use pacq_core::quantpack::format::{read_matrix, read_weights, write_matrix, write_weights};
use pacq_core::quantpack::{
    dequantize, dequantize_as, rtn_quantize, BitWidth, PackDim, PackedWeights, QuantizedWeights,
};
use pacq_core::{Flags, HalfMatrix};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, FlowName};
use crate::gen;
use crate::report::{write_file, Cell, ColumnDoc, Table};

/// Settings echoed into JSON reports.
pub fn config_json(cfg: &ExperimentConfig) -> Value {
    json!({
        "shape": cfg.shape.to_string(),
        "flow": cfg.flow.map(FlowName::as_str),
        "bits": cfg.bits,
        "group": cfg.group.map(|g| format!("{}x{}", g.gk, g.gn)),
        "dp": cfg.hw.dp.dp_width,
        "dup": cfg.hw.dp.dup_factor,
        "fill_latency": cfg.hw.dp.fill_latency,
        "acc": cfg.hw.accumulator.to_string(),
        "seed": cfg.seed,
        "cost": cfg.cost,
    })
}

pub const VERIFY_COLUMNS: &[ColumnDoc] = &[
    ("bits", "weight width"),
    ("activations", "normal-or-zero FP16 activation patterns tested"),
    ("cases", "activation and weight pairs compared"),
    ("mismatches", "lanes that differ from the reference FP16 multiply"),
    (
        "six_bit_carries",
        "lanes whose low six-bit add carried into the upper mantissa",
    ),
    (
        "normalizations",
        "lanes whose product needed a one-bit normalization shift",
    ),
    ("round_carries", "lanes whose rounding carried into the exponent"),
    (
        "first_mismatch",
        "a:b:lane:reference of the first mismatch, blank if none",
    ),
    ("verdict", "PASS or FAIL"),
];

/// Exhaustive lane-equivalence check of the parallel multiplier.
pub fn verify_mul(widths: &[BitWidth]) -> Result<(Table, bool)> {
    let mut t = Table::from_docs("verify-mul", VERIFY_COLUMNS);
    let mut ok = true;
    for &bits in widths {
        let r = verify_exhaustive(bits);
        ok &= r.passed();
        let first = r
            .first_mismatch
            .map(|(a, b, lane, reference)| format!("{a:#06x}:{b}:{lane:#06x}:{reference:#06x}"));
        t.push(vec![
            r.bits.into(),
            r.activations.into(),
            r.cases.into(),
            r.mismatches.into(),
            r.carries.six_bit_carries.into(),
            r.carries.normalizations.into(),
            r.carries.round_carries.into(),
            first.into(),
            if r.passed() { "PASS" } else { "FAIL" }.into(),
        ]);
    }
    Ok((t, ok))
}

/// Writes a seeded `k` x `n` real-valued weight matrix.
pub fn gen_weights(cfg: &ExperimentConfig, output: &Path) -> Result<()> {
    let mut rng = gen::rng(cfg.seed);
    let w = gen::real_weights(&mut rng, cfg.shape.k, cfg.shape.n);
    let mut buf = Vec::new();
    write_matrix(&mut buf, &w)?;
    write_file(output, &buf)
}

pub const QUANTIZE_COLUMNS: &[ColumnDoc] = &[
    ("group_row", "group index along k"),
    ("group_col", "group index along n"),
    ("scale", "FP16 scale of the group"),
    ("max_abs_error", "largest |w - fp16(q * scale)| in the group"),
    ("mean_abs_error", "mean |w - fp16(q * scale)| in the group"),
    ("max_error_over_scale", "max_abs_error divided by scale"),
];

/// Quantizes a `.pqf` matrix and writes the packed `.pqw` file.
pub fn quantize(cfg: &ExperimentConfig, input: &Path, output: &Path) -> Result<(Table, PackedWeights)> {
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let w = read_matrix(&mut BufReader::new(file)).with_context(|| format!("reading {}", input.display()))?;
    let bits = cfg.quant_bits()?;
    let group = cfg.group_for(w.k(), w.n());
    let q = rtn_quantize(&w, bits, group)?;
    let packed = PackedWeights::from_quantized(&q, cfg.pack_dim())?;
    let mut buf = Vec::new();
    write_weights(&mut buf, &packed)?;
    write_file(output, &buf)?;

    let deq = dequantize_as::<f64>(&q);
    let mut t = Table::from_docs("quantize", QUANTIZE_COLUMNS);
    let (gr, gc) = group.grid(w.k(), w.n());
    for bi in 0..gr {
        for bj in 0..gc {
            let (mut max, mut sum) = (0.0f64, 0.0f64);
            for i in bi * group.gk..(bi + 1) * group.gk {
                for j in bj * group.gn..(bj + 1) * group.gn {
                    let e = (w.get(i, j) as f64 - deq.get(i, j)).abs();
                    max = max.max(e);
                    sum += e;
                }
            }
            let scale = q.scales[(bi, bj)].to_f64();
            t.push(vec![
                bi.into(),
                bj.into(),
                scale.into(),
                max.into(),
                (sum / group.size() as f64).into(),
                (max / scale).into(),
            ]);
        }
    }
    Ok((t, packed))
}

pub const GEMM_COLUMNS: &[ColumnDoc] = &[
    ("shape", "GEMM shape mMnNkK"),
    ("flow", "flow and weight width, e.g. npack-w4"),
    ("acc", "accumulator policy"),
    ("gk", "group extent along k"),
    ("gn", "group extent along n"),
    ("seed", "operand generator seed"),
    ("outputs", "elements of C"),
    ("mismatches", "elements that differ from the exact oracle"),
    ("max_ulp", "largest distance from the oracle in FP16 ulps"),
    ("flags", "exception flags raised, |-separated"),
    ("verdict", "PASS or FAIL under wide accumulation, MEASURED under fp16"),
];

/// Functional result of one GEMM against its exact oracle.
#[derive(Debug, Clone)]
pub struct GemmRun {
    pub flow: FlowKind,
    pub c: HalfMatrix,
    pub oracle: HalfMatrix,
    pub mismatches: usize,
    pub max_ulp: u32,
    pub flags: Flags,
    pub passed: bool,
}

/// Runs the configured flow on seeded activations and either the weights in
/// `weights` or seeded ones, and compares with the exact single-rounding
/// oracle for that flow.
pub fn gemm(cfg: &ExperimentConfig, weights: Option<&Path>) -> Result<GemmRun> {
    let shape = cfg.shape;
    let flow = cfg.flow_kind(cfg.flow.unwrap_or(FlowName::Npack))?;
    let mut rng = gen::rng(cfg.seed);
    let a = gen::activations(&mut rng, shape.m, shape.k);

    let (out, oracle) = match flow {
        FlowKind::DequantStandard(WeightMode::Fp16) => {
            if weights.is_some() {
                bail!("--weights holds quantized weights; use --bits 4 or 2");
            }
            let b = gen::half_weights(&mut rng, shape.k, shape.n);
            let group = cfg.group_for(shape.k, shape.n);
            let out = simulate(shape, flow, &cfg.hw, &a, Operand::Half { b: &b, group })?;
            (out, exact_half_gemm(&a, &b)?)
        }
        _ => {
            let q = match weights {
                Some(p) => load_weights(p, shape, flow)?,
                None => {
                    let bits = cfg.quant_bits()?;
                    let w = gen::real_weights(&mut rng, shape.k, shape.n);
                    rtn_quantize(&w, bits, cfg.group_for(shape.k, shape.n))?
                }
            };
            match flow.pack_dim() {
                None => {
                    let b = dequantize(&q);
                    let out = simulate(shape, flow, &cfg.hw, &a, Operand::Half { b: &b, group: q.group })?;
                    (out, exact_half_gemm(&a, &b)?)
                }
                Some(dim) => {
                    let p = PackedWeights::from_quantized(&q, dim)?;
                    let out = simulate(shape, flow, &cfg.hw, &a, Operand::Packed(&p))?;
                    (out, exact_quantized_gemm(&a, &q)?)
                }
            }
        }
    };

    let mut mismatches = 0;
    let mut max_ulp = 0;
    for (x, y) in out.c.as_slice().iter().zip(oracle.as_slice()) {
        if x != y {
            mismatches += 1;
            max_ulp = max_ulp.max(x.ulp_distance(*y));
        }
    }
    Ok(GemmRun {
        flow,
        c: out.c,
        oracle,
        mismatches,
        max_ulp,
        flags: out.flags,
        passed: mismatches == 0,
    })
}

fn load_weights(path: &Path, shape: GemmShape, flow: FlowKind) -> Result<QuantizedWeights> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let p = read_weights(&mut BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    if (p.k(), p.n()) != (shape.k, shape.n) {
        bail!(
            "{} holds {}x{} weights, the shape needs {}x{}",
            path.display(),
            p.k(),
            p.n(),
            shape.k,
            shape.n
        );
    }
    if Some(p.bits()) != flow.quant_bits() {
        bail!(
            "{} holds {} weights, the flow needs {}",
            path.display(),
            p.bits(),
            flow.weight_bits()
        );
    }
    Ok(p.to_quantized()?)
}

pub fn gemm_table(cfg: &ExperimentConfig, run: &GemmRun) -> Table {
    let g = cfg.group_for(cfg.shape.k, cfg.shape.n);
    let verdict = match (cfg.hw.accumulator, run.passed) {
        (AccumulatorPolicy::Fp16Sequential, _) => "MEASURED",
        (AccumulatorPolicy::WideExact, true) => "PASS",
        (AccumulatorPolicy::WideExact, false) => "FAIL",
    };
    let mut t = Table::from_docs("gemm", GEMM_COLUMNS);
    t.push(vec![
        cfg.shape.to_string().into(),
        run.flow.to_string().into(),
        cfg.hw.accumulator.to_string().into(),
        g.gk.into(),
        g.gn.into(),
        cfg.seed.into(),
        run.c.as_slice().len().into(),
        run.mismatches.into(),
        run.max_ulp.into(),
        run.flags.names().join("|").into(),
        verdict.into(),
    ]);
    t
}

/// C as CSV, one row per output row, values in shortest decimal form.
pub fn matrix_csv(c: &HalfMatrix) -> Vec<u8> {
    let mut s = String::new();
    for r in 0..c.rows() {
        let row: Vec<String> = c.row(r).iter().map(|h| h.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s.into_bytes()
}

const COUNTER_DOCS: [&str; 19] = [
    "32-bit register reads of A",
    "32-bit register reads of B",
    "32-bit register reads of C partial sums",
    "32-bit register writes of C",
    "A tile fetch instructions",
    "B tile fetch instructions",
    "A tiles evicted while still needed",
    "operand reads from tensor-core buffers",
    "dot-product unit issues",
    "baseline FP16 multiplies",
    "parallel multiplier issues",
    "FP16 additions",
    "general-core instructions (unpack, dequantize, offset correction)",
    "32-bit L1 accesses",
    "scale loads",
    "tensor-core cycles",
    "eviction stall cycles",
    "dequantization cycles on the critical path",
    "total cycles",
];

/// Columns shared by `simulate` and `sweep`.
pub fn sim_columns() -> Vec<ColumnDoc> {
    let mut cols: Vec<ColumnDoc> = vec![
        ("shape", "GEMM shape mMnNkK"),
        ("flow", "flow and weight width, e.g. npack-w4"),
        ("bits", "weight width"),
        ("dp", "dot-product width"),
        ("dup", "adder-tree duplication factor"),
        ("acc", "accumulator policy"),
        ("gk", "group extent along k"),
        ("gn", "group extent along n"),
        ("macs", "multiply-accumulates of the GEMM"),
    ];
    cols.extend(FlowCounters::FIELD_NAMES.into_iter().zip(COUNTER_DOCS));
    cols.extend([
        ("rf_total", "all register file accesses"),
        ("rf_total_without_c", "register reads of A and B only"),
        ("fetch_instructions", "A and B fetch instructions"),
        ("energy_rf_pj", "register file energy"),
        ("energy_buffer_pj", "operand buffer energy"),
        ("energy_multiply_pj", "multiplier energy"),
        ("energy_add_pj", "adder energy"),
        ("energy_general_core_pj", "general-core energy"),
        ("energy_l1_pj", "L1 and scale load energy"),
        ("energy_static_pj", "static energy"),
        ("energy_total_pj", "sum of the energy columns"),
        ("energy_dynamic_pj", "energy_total_pj without static energy"),
        ("edp", "energy_total_pj times cycles"),
        ("macs_per_pj", "macs over energy_total_pj"),
        ("macs_per_dynamic_pj", "macs over energy_dynamic_pj"),
        ("speedup_vs_dequant", "dequant cycles over these cycles"),
        ("speedup_vs_kpack", "kpack cycles over these cycles"),
        ("edp_reduction_vs_dequant", "1 - edp / dequant edp"),
        ("edp_reduction_vs_kpack", "1 - edp / kpack edp"),
        ("rf_reduction_vs_kpack", "1 - rf_total / kpack rf_total"),
        (
            "rf_reduction_without_c_vs_kpack",
            "1 - rf_total_without_c / kpack rf_total_without_c",
        ),
    ]);
    cols
}

/// Counters, energy and EDP of every compared flow at one configuration.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub runs: Vec<(FlowKind, FlowCounters)>,
    pub report: EdpReport,
}

impl SimResult {
    pub fn counters(&self, flow: FlowKind) -> Option<&FlowCounters> {
        self.runs.iter().find(|(f, _)| *f == flow).map(|(_, c)| c)
    }
}

pub fn simulate_flows(cfg: &ExperimentConfig) -> Result<SimResult> {
    let shape = cfg.shape;
    let group = cfg.group_for(shape.k, shape.n);
    let flows = cfg.flows()?;
    let runs: Vec<(FlowKind, FlowCounters)> = flows
        .iter()
        .map(|&f| Ok((f, simulate_counters(shape, f, &cfg.hw, group)?)))
        .collect::<Result<_>>()?;
    let points = evaluate(&runs, &cfg.cost, &cfg.hw, shape.macs());
    let baselines: Vec<FlowKind> = flows.iter().copied().filter(|f| f.name() != "npack").collect();
    Ok(SimResult {
        report: edp_report(points, &baselines),
        runs,
    })
}

fn sim_rows(cfg: &ExperimentConfig, res: &SimResult) -> Vec<Vec<Cell>> {
    let g = cfg.group_for(cfg.shape.k, cfg.shape.n);
    let by_name = |name: &str| res.runs.iter().map(|(f, _)| *f).find(|f| f.name() == name);
    let dequant = by_name("dequant");
    let kpack = by_name("kpack");
    let mut rows = Vec::new();
    for (flow, c) in &res.runs {
        if cfg.flow.is_some_and(|f| f.as_str() != flow.name()) {
            continue;
        }
        let p = res.report.point(*flow).expect("evaluated");
        let ratio = |base: Option<FlowKind>| base.and_then(|b| res.report.ratio(*flow, b));
        let rf_red = |base: Option<FlowKind>, pick: fn(&FlowCounters) -> u64| {
            base.and_then(|b| res.counters(b))
                .map(|bc| 1.0 - pick(c) as f64 / pick(bc) as f64)
        };
        let mut row: Vec<Cell> = vec![
            cfg.shape.to_string().into(),
            flow.to_string().into(),
            flow.weight_bits().into(),
            cfg.hw.dp.dp_width.into(),
            cfg.hw.dp.dup_factor.into(),
            cfg.hw.accumulator.to_string().into(),
            g.gk.into(),
            g.gn.into(),
            cfg.shape.macs().into(),
        ];
        row.extend(c.named_fields().iter().map(|&(_, v)| Cell::from(v)));
        row.extend([
            c.rf_total().into(),
            c.rf_total_without_c().into(),
            c.fetch_instructions().into(),
        ]);
        row.extend(p.energy.to_array().iter().map(|&e| Cell::from(e)));
        row.extend([
            p.energy_pj.into(),
            p.energy.dynamic().into(),
            p.edp.into(),
            p.macs_per_pj.into(),
            p.macs_per_dynamic_pj.into(),
            ratio(dequant).map(|r| r.speedup).into(),
            ratio(kpack).map(|r| r.speedup).into(),
            ratio(dequant).map(|r| r.edp_reduction).into(),
            ratio(kpack).map(|r| r.edp_reduction).into(),
            rf_red(kpack, FlowCounters::rf_total).into(),
            rf_red(kpack, FlowCounters::rf_total_without_c).into(),
        ]);
        rows.push(row);
    }
    rows
}

pub fn simulate_table(cfg: &ExperimentConfig) -> Result<(Table, SimResult)> {
    let res = simulate_flows(cfg)?;
    let mut t = Table::from_docs("simulate", &sim_columns());
    for row in sim_rows(cfg, &res) {
        t.push(row);
    }
    Ok((t, res))
}

/// Event logs of the compared flows, one file per flow.
pub fn write_traces(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for flow in cfg.flows()? {
        if cfg.flow.is_some_and(|f| f.as_str() != flow.name()) {
            continue;
        }
        let path = dir.join(format!("trace-{flow}.txt"));
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_trace(&mut w, cfg.shape, flow, &cfg.hw)?;
        w.flush()?;
    }
    Ok(())
}

/// Sweepable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Dup,
    Dp,
    Shape,
    Bits,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Dup => "dup",
            Axis::Dp => "dp",
            Axis::Shape => "shape",
            Axis::Bits => "bits",
        }
    }

    pub fn default_values(self) -> &'static [&'static str] {
        match self {
            Axis::Dup => &["1", "2", "4"],
            Axis::Dp => &["4", "8", "16"],
            Axis::Shape => &[],
            Axis::Bits => &["4", "2"],
        }
    }

    fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        let int = || {
            value
                .parse::<usize>()
                .with_context(|| format!("bad {} value {value:?}", self.name()))
        };
        match self {
            Axis::Dup => {
                c.hw.dp = DpConfig {
                    dup_factor: int()?,
                    ..c.hw.dp
                }
            }
            Axis::Dp => {
                c.hw.dp = DpConfig {
                    dp_width: int()?,
                    ..c.hw.dp
                }
            }
            Axis::Shape => c.shape = value.parse()?,
            Axis::Bits => c.bits = int()? as u32,
        }
        for flow in c.flows()? {
            c.hw.validate(flow)
                .with_context(|| format!("{} = {value}", self.name()))?;
        }
        Ok(c)
    }
}

pub fn sweep_columns() -> Vec<ColumnDoc> {
    let mut cols = vec![
        ("point", "index of the sweep point"),
        ("axis", "swept parameter"),
        ("value", "value of the swept parameter"),
    ];
    cols.extend(sim_columns());
    cols
}

/// One `simulate` row set per axis value, in the order given.
pub fn sweep(cfg: &ExperimentConfig, axis: Axis, values: &[String]) -> Result<Table> {
    let values: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        bail!("sweep over {} needs at least one value", axis.name());
    }
    let mut t = Table::from_docs("sweep", &sweep_columns());
    for (i, v) in values.iter().enumerate() {
        let point = axis.apply(cfg, v)?;
        let res = simulate_flows(&point)?;
        for row in sim_rows(&point, &res) {
            let mut full: Vec<Cell> = vec![i.into(), axis.name().into(), (*v).into()];
            full.extend(row);
            t.push(full);
        }
    }
    Ok(t)
}

/// Widths named by `bits`, or both packed widths when unset.
pub fn verify_widths(bits: Option<u32>) -> Result<Vec<BitWidth>> {
    match bits {
        None => Ok(vec![BitWidth::Int4, BitWidth::Int2]),
        Some(16) => bail!("verify-mul checks the 4- and 2-bit parallel multiplier"),
        Some(b) => Ok(vec![BitWidth::from_bits(b)?]),
    }
}

pub fn pack_name(dim: PackDim) -> &'static str {
    match dim {
        PackDim::K => "k",
        PackDim::N => "n",
    }
}
