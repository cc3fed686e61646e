//! Linear event-energy model and energy-delay products.
//!
//! Energy is a dot product of [`FlowCounters`] with per-event costs in pJ,
//! plus static energy proportional to cycles. The shipped defaults are
//! illustrative magnitudes, not measured silicon.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::{FlowCounters, FlowKind, HwConfig, DPS_PER_OCTET, OCTETS};

#[derive(Debug, Error)]
pub enum CostError {
    #[error("cost parameter {name} = {value} must be finite and nonnegative")]
    Invalid { name: &'static str, value: f64 },
    #[error("cost file: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Per-event energies in pJ and static power in pJ per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// One 32-bit register file access.
    pub rf_access: f64,
    /// One operand read from a tensor-core buffer.
    pub buffer_access: f64,
    /// One baseline FP16 multiply.
    pub fp16_mul: f64,
    /// One parallel FP-INT multiplier issue (all lanes).
    pub parallel_mul: f64,
    pub fp16_add: f64,
    /// One general-core instruction (unpack, dequantize, offset correction).
    pub general_core_op: f64,
    /// One 32-bit L1/shared-memory access or scale fetch.
    pub l1_access: f64,
    /// Static energy of the tensor core per cycle.
    pub static_per_cycle: f64,
    /// Static energy per FP16 adder per cycle.
    pub adder_static_per_cycle: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            rf_access: 6.0,
            buffer_access: 0.5,
            fp16_mul: 1.0,
            parallel_mul: 1.3,
            fp16_add: 0.4,
            general_core_op: 2.0,
            l1_access: 10.0,
            static_per_cycle: 50.0,
            adder_static_per_cycle: 0.2,
        }
    }
}

impl CostParams {
    pub const NAMES: [&'static str; 9] = [
        "rf_access",
        "buffer_access",
        "fp16_mul",
        "parallel_mul",
        "fp16_add",
        "general_core_op",
        "l1_access",
        "static_per_cycle",
        "adder_static_per_cycle",
    ];

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.rf_access,
            self.buffer_access,
            self.fp16_mul,
            self.parallel_mul,
            self.fp16_add,
            self.general_core_op,
            self.l1_access,
            self.static_per_cycle,
            self.adder_static_per_cycle,
        ]
    }

    pub fn from_array(v: [f64; 9]) -> Self {
        CostParams {
            rf_access: v[0],
            buffer_access: v[1],
            fp16_mul: v[2],
            parallel_mul: v[3],
            fp16_add: v[4],
            general_core_op: v[5],
            l1_access: v[6],
            static_per_cycle: v[7],
            adder_static_per_cycle: v[8],
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        for (name, value) in Self::NAMES.into_iter().zip(self.to_array()) {
            if !value.is_finite() || value < 0.0 {
                return Err(CostError::Invalid { name, value });
            }
        }
        Ok(())
    }

    /// Parses a TOML table of the fields above; missing keys keep defaults.
    pub fn from_toml(text: &str) -> Result<Self, CostError> {
        let p: CostParams = toml::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    /// Every combination of per-entry multipliers from `factors`, in
    /// lexicographic order of the entries.
    pub fn grid(&self, factors: &[f64]) -> impl Iterator<Item = CostParams> + '_ {
        let base = self.to_array();
        let n = factors.len();
        let total = if n == 0 { 0 } else { n.pow(base.len() as u32) };
        let factors = factors.to_vec();
        (0..total).map(move |mut idx| {
            let mut v = base;
            for slot in v.iter_mut().rev() {
                *slot *= factors[idx % n];
                idx /= n;
            }
            CostParams::from_array(v)
        })
    }
}

/// FP16 adders instantiated in one tensor core.
pub fn adder_count(hw: &HwConfig) -> u64 {
    (OCTETS * DPS_PER_OCTET * hw.dp.dp_width * hw.dp.dup_factor) as u64
}

/// Energy per category in pJ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub rf: f64,
    pub buffer: f64,
    pub multiply: f64,
    pub add: f64,
    pub general_core: f64,
    pub l1: f64,
    #[serde(rename = "static")]
    pub static_: f64,
}

impl EnergyBreakdown {
    pub const NAMES: [&'static str; 7] = ["rf", "buffer", "multiply", "add", "general_core", "l1", "static"];

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.rf,
            self.buffer,
            self.multiply,
            self.add,
            self.general_core,
            self.l1,
            self.static_,
        ]
    }

    pub fn total(&self) -> f64 {
        self.to_array().iter().sum()
    }

    /// Everything except static energy.
    pub fn dynamic(&self) -> f64 {
        self.total() - self.static_
    }
}

pub fn energy(c: &FlowCounters, p: &CostParams, hw: &HwConfig) -> EnergyBreakdown {
    let f = |n: u64| n as f64;
    EnergyBreakdown {
        rf: f(c.rf_total()) * p.rf_access,
        buffer: f(c.buffer_accesses) * p.buffer_access,
        multiply: f(c.fp16_mults) * p.fp16_mul + f(c.parallel_mul_issues) * p.parallel_mul,
        add: f(c.fp16_adds) * p.fp16_add,
        general_core: f(c.general_core_ops) * p.general_core_op,
        l1: f(c.l1_accesses + c.scale_fetches) * p.l1_access,
        static_: f(c.cycles) * (p.static_per_cycle + f(adder_count(hw)) * p.adder_static_per_cycle),
    }
}

/// Energy, delay and their product for one flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdpPoint {
    pub flow: FlowKind,
    pub energy: EnergyBreakdown,
    pub energy_pj: f64,
    pub cycles: u64,
    pub edp: f64,
    /// Multiply-accumulates per pJ, counting static energy.
    pub macs_per_pj: f64,
    /// Multiply-accumulates per pJ of dynamic energy only.
    pub macs_per_dynamic_pj: f64,
}

pub fn edp(flow: FlowKind, energy: EnergyBreakdown, cycles: u64, macs: u64) -> EdpPoint {
    let total = energy.total();
    let per = |e: f64| if e > 0.0 { macs as f64 / e } else { 0.0 };
    EdpPoint {
        flow,
        energy,
        energy_pj: total,
        cycles,
        edp: total * cycles as f64,
        macs_per_pj: per(total),
        macs_per_dynamic_pj: per(energy.dynamic()),
    }
}

/// EDP of several flows with ratios against named baselines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdpReport {
    pub points: Vec<EdpPoint>,
    pub ratios: Vec<EdpRatio>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdpRatio {
    pub flow: FlowKind,
    pub baseline: FlowKind,
    pub edp_ratio: f64,
    /// `1 - edp_ratio`.
    pub edp_reduction: f64,
    pub energy_ratio: f64,
    pub speedup: f64,
}

impl EdpReport {
    pub fn point(&self, flow: FlowKind) -> Option<&EdpPoint> {
        self.points.iter().find(|p| p.flow == flow)
    }

    pub fn ratio(&self, flow: FlowKind, baseline: FlowKind) -> Option<&EdpRatio> {
        self.ratios.iter().find(|r| r.flow == flow && r.baseline == baseline)
    }
}

/// Ratios of every point against every flow in `baselines` that is present.
pub fn edp_report(points: Vec<EdpPoint>, baselines: &[FlowKind]) -> EdpReport {
    let mut ratios = Vec::new();
    for &b in baselines {
        let Some(base) = points.iter().find(|p| p.flow == b).copied() else {
            continue;
        };
        for p in &points {
            ratios.push(EdpRatio {
                flow: p.flow,
                baseline: b,
                edp_ratio: p.edp / base.edp,
                edp_reduction: 1.0 - p.edp / base.edp,
                energy_ratio: p.energy_pj / base.energy_pj,
                speedup: base.cycles as f64 / p.cycles as f64,
            });
        }
    }
    EdpReport { points, ratios }
}

/// Energy and EDP of each `(flow, counters)` pair.
pub fn evaluate(runs: &[(FlowKind, FlowCounters)], p: &CostParams, hw: &HwConfig, macs: u64) -> Vec<EdpPoint> {
    runs.iter()
        .map(|(flow, c)| edp(*flow, energy(c, p, hw), c.cycles, macs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::{simulate_counters, standard_flows, GemmShape};
    use crate::quantpack::{BitWidth, GroupSpec};

    fn sample_counters() -> FlowCounters {
        FlowCounters {
            rf_reads_a: 10,
            rf_reads_b: 20,
            rf_writes_c: 5,
            buffer_accesses: 8,
            fp16_mults: 3,
            parallel_mul_issues: 2,
            fp16_adds: 7,
            general_core_ops: 4,
            l1_accesses: 6,
            scale_fetches: 1,
            cycles: 9,
            ..FlowCounters::default()
        }
    }

    #[test]
    fn zero_counters_zero_energy() {
        let e = energy(&FlowCounters::default(), &CostParams::default(), &HwConfig::default());
        assert_eq!(e.total(), 0.0);
    }

    #[test]
    fn linear_in_counters() {
        let hw = HwConfig::default();
        let p = CostParams::default();
        let c = sample_counters();
        let one = energy(&c, &p, &hw).total();
        let two = energy(&c.scaled(2), &p, &hw).total();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let e = energy(&sample_counters(), &CostParams::default(), &HwConfig::default());
        assert_eq!(e.to_array().iter().sum::<f64>(), e.total());
        // 35 regs * 6 + 8 * 0.5 + (3 + 2.6) + 2.8 + 8 + 70 + 9 * (50 + 64 adders * 0.2)
        let expected = 210.0 + 4.0 + 5.6 + 2.8 + 8.0 + 70.0 + 9.0 * (50.0 + 12.8);
        assert!((e.total() - expected).abs() < 1e-9);
    }

    #[test]
    fn monotone_in_every_parameter() {
        let hw = HwConfig::default();
        let c = sample_counters();
        let base = CostParams::default();
        let e0 = energy(&c, &base, &hw).total();
        for i in 0..9 {
            let mut v = base.to_array();
            v[i] *= 1.5;
            assert!(energy(&c, &CostParams::from_array(v), &hw).total() >= e0);
        }
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let p = CostParams::from_toml("rf_access = 3.5\nstatic_per_cycle = 0.0\n").unwrap();
        assert_eq!(p.rf_access, 3.5);
        assert_eq!(p.fp16_add, CostParams::default().fp16_add);
        let text = toml::to_string(&CostParams::default()).unwrap();
        assert_eq!(CostParams::from_toml(&text).unwrap(), CostParams::default());
        assert!(CostParams::from_toml("rf_access = -1.0").is_err());
        assert!(CostParams::from_toml("rf_acess = 1.0").is_err());
    }

    #[test]
    fn grid_enumerates_all_points() {
        let p = CostParams::default();
        let pts: Vec<CostParams> = p.grid(&[0.5, 1.0]).collect();
        assert_eq!(pts.len(), 512);
        assert_eq!(pts[0].rf_access, 3.0);
        assert_eq!(pts[1].adder_static_per_cycle, 0.2);
        assert_eq!(pts[511], p);
    }

    #[test]
    fn equal_flows_ratio_one() {
        let hw = HwConfig::default();
        let flow = FlowKind::NPackedPacq(BitWidth::Int4);
        let c = sample_counters();
        let pts = evaluate(&[(flow, c)], &CostParams::default(), &hw, 100);
        let r = edp_report(pts, &[flow]);
        assert_eq!(r.ratios[0].edp_ratio, 1.0);
        assert_eq!(r.ratios[0].speedup, 1.0);
    }

    #[test]
    fn small_shape_energy_ordering() {
        let hw = HwConfig::default();
        let shape = GemmShape::new(16, 16, 16).unwrap();
        let [_, k, n] = standard_flows(BitWidth::Int4);
        let e = |f| {
            let c = simulate_counters(shape, f, &hw, GroupSpec::new(16, 4)).unwrap();
            energy(&c, &CostParams::default(), &hw).total()
        };
        assert!(e(n) < e(k));
    }
}
