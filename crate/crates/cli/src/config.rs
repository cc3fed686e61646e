//! Experiment options from flags and an optional TOML file.
//!
//! Config file keys mirror the long flags, and flags override file values.
//! Relative paths in a file are resolved against the file's directory.
//!
//! ```toml
//! shape = "16x4096x4096"   # MxNxK, multiples of 16
//! flow = "npack"           # dequant | kpack | npack
//! bits = 4                 # 16 | 4 | 2
//! group = "32x4"           # GKxGN quantization group
//! dup = 2                  # adder-tree copies: 1 | 2 | 4
//! dp = 4                   # dot-product width: 4 | 8 | 16
//! acc = "wide"             # fp16 | wide
//! cost = "costs.toml"      # energy parameters in pJ
//! seed = 7                 # operand generator seed
//! out = "results"          # output directory
//! format = "csv"           # csv | json
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::builder::TypedValueParser;
use clap::{Args, ValueEnum};
use pacq_core::costmodel::CostParams;
use pacq_core::dataflow::{FlowKind, GemmShape, HwConfig};
use pacq_core::pmul::{AccumulatorPolicy, DpConfig, WeightMode};
use pacq_core::quantpack::{BitWidth, GroupSpec, PackDim};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowName {
    Dequant,
    Kpack,
    Npack,
}

impl FlowName {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowName::Dequant => "dequant",
            FlowName::Kpack => "kpack",
            FlowName::Npack => "npack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccName {
    Fp16,
    Wide,
}

impl From<AccName> for AccumulatorPolicy {
    fn from(a: AccName) -> Self {
        match a {
            AccName::Fp16 => AccumulatorPolicy::Fp16Sequential,
            AccName::Wide => AccumulatorPolicy::WideExact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

/// Options shared by every command; all optional so that a config file can
/// supply them.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// TOML file with the same keys as these flags
    #[arg(long, global = true, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// GEMM shape MxNxK [default: 16x16x16]
    #[arg(long, global = true, value_name = "MxNxK")]
    pub shape: Option<String>,
    /// GEMM flow [default: npack for gemm, all flows for simulate and sweep]
    #[arg(long, global = true, value_enum)]
    pub flow: Option<FlowName>,
    /// Weight bits: 16, 4 or 2 [default: 4]
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["16", "4", "2"]).map(|s| s.parse::<u32>().unwrap()))]
    pub bits: Option<u32>,
    /// Quantization group GKxGN [default: 32x4, clipped to the matrix]
    #[arg(long, global = true, value_name = "GKxGN")]
    pub group: Option<String>,
    /// Adder-tree duplication factor: 1, 2 or 4 [default: 2]
    #[arg(long, global = true)]
    pub dup: Option<usize>,
    /// Dot-product width: 4, 8 or 16 [default: 4]
    #[arg(long, global = true)]
    pub dp: Option<usize>,
    /// Accumulator policy [default: wide]
    #[arg(long, global = true, value_enum)]
    pub acc: Option<AccName>,
    /// Energy parameter file (TOML, pJ per event)
    #[arg(long, global = true, value_name = "FILE")]
    pub cost: Option<PathBuf>,
    /// Seed of the operand generator [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; reports go to stdout when absent
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Report format [default: csv]
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

impl Options {
    /// Flags layered over the config file named by `--config`, if any.
    pub fn merged(&self) -> Result<Options> {
        let Some(path) = &self.config else {
            return Ok(self.clone());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut file: Options = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: Option<PathBuf>| p.map(|p| if p.is_relative() { base.join(p) } else { p });
        file.cost = rebase(file.cost.take());
        file.out = rebase(file.out.take());
        Ok(Options {
            config: self.config.clone(),
            shape: self.shape.clone().or(file.shape),
            flow: self.flow.or(file.flow),
            bits: self.bits.or(file.bits),
            group: self.group.clone().or(file.group),
            dup: self.dup.or(file.dup),
            dp: self.dp.or(file.dp),
            acc: self.acc.or(file.acc),
            cost: self.cost.clone().or(file.cost),
            seed: self.seed.or(file.seed),
            out: self.out.clone().or(file.out),
            format: self.format.or(file.format),
        })
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let o = self.merged()?;
        let shape: GemmShape = o.shape.as_deref().unwrap_or("16x16x16").parse()?;
        let bits = o.bits.unwrap_or(4);
        if ![16, 4, 2].contains(&bits) {
            bail!("--bits must be 16, 4 or 2, got {bits}");
        }
        let group = o.group.as_deref().map(parse_group).transpose()?;
        let dp = DpConfig {
            dp_width: o.dp.unwrap_or(4),
            dup_factor: o.dup.unwrap_or(2),
            ..DpConfig::default()
        };
        let hw = HwConfig {
            dp,
            accumulator: o.acc.unwrap_or(AccName::Wide).into(),
            ..HwConfig::default()
        };
        let cost = match &o.cost {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading cost file {}", p.display()))?;
                CostParams::from_toml(&text).with_context(|| format!("in cost file {}", p.display()))?
            }
            None => CostParams::default(),
        };
        let cfg = ExperimentConfig {
            shape,
            flow: o.flow,
            bits,
            group,
            hw,
            cost,
            cost_path: o.cost,
            seed: o.seed.unwrap_or(0),
            out: o.out,
            format: o.format.unwrap_or_default(),
        };
        for flow in cfg.flows()? {
            cfg.hw.validate(flow)?;
        }
        Ok(cfg)
    }
}

/// Parses `GKxGN`, or `gN` as shorthand for `Nx1`.
pub fn parse_group(s: &str) -> Result<GroupSpec> {
    let t = s.trim();
    if let Some(rest) = t.strip_prefix('g') {
        let gk: usize = rest.parse().with_context(|| format!("bad group {s:?}"))?;
        return Ok(GroupSpec::new(gk, 1));
    }
    let parts: Vec<&str> = t.split(['x', 'X']).collect();
    match parts.as_slice() {
        [gk, gn] => {
            let gk = gk.trim().parse().with_context(|| format!("bad group {s:?}"))?;
            let gn = gn.trim().parse().with_context(|| format!("bad group {s:?}"))?;
            if gk == 0 || gn == 0 {
                bail!("group extents must be positive, got {s:?}");
            }
            Ok(GroupSpec::new(gk, gn))
        }
        _ => bail!("expected GKxGN or gN, got {s:?}"),
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub shape: GemmShape,
    pub flow: Option<FlowName>,
    pub bits: u32,
    pub group: Option<GroupSpec>,
    pub hw: HwConfig,
    pub cost: CostParams,
    pub cost_path: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: Format,
}

impl ExperimentConfig {
    pub fn quant_bits(&self) -> Result<BitWidth> {
        match self.bits {
            16 => bail!("this command needs 4- or 2-bit weights"),
            b => Ok(BitWidth::from_bits(b)?),
        }
    }

    /// `--group`, or 32x4 clipped to `k` x `n`.
    pub fn group_for(&self, k: usize, n: usize) -> GroupSpec {
        self.group.unwrap_or(GroupSpec::new(32.min(k), 4.min(n)))
    }

    pub fn flow_kind(&self, name: FlowName) -> Result<FlowKind> {
        Ok(FlowKind::from_parts(name.as_str(), self.bits)?)
    }

    /// Flows compared by `simulate` and `sweep`: dequant, kpack and npack at
    /// the configured width, or the FP16 dequant flow alone for 16 bits.
    pub fn flows(&self) -> Result<Vec<FlowKind>> {
        match WeightMode::from_bits(self.bits) {
            Some(WeightMode::Fp16) => Ok(vec![FlowKind::DequantStandard(WeightMode::Fp16)]),
            Some(WeightMode::Packed(b)) => Ok(pacq_core::dataflow::standard_flows(b).to_vec()),
            None => bail!("unsupported weight bits {}", self.bits),
        }
    }

    pub fn pack_dim(&self) -> PackDim {
        match self.flow {
            Some(FlowName::Kpack) => PackDim::K,
            _ => PackDim::N,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_syntax() {
        assert_eq!(parse_group("32x4").unwrap(), GroupSpec::new(32, 4));
        assert_eq!(parse_group("g128").unwrap(), GroupSpec::new(128, 1));
        assert!(parse_group("32").is_err());
        assert!(parse_group("0x4").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = std::env::temp_dir().join(format!("pacq-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("exp.toml");
        std::fs::write(&path, "shape = \"32x32x32\"\nbits = 2\nseed = 9\nout = \"res\"\n").unwrap();
        let o = Options {
            config: Some(path),
            bits: Some(4),
            ..Options::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.shape, GemmShape::new(32, 32, 32).unwrap());
        assert_eq!((cfg.bits, cfg.seed), (4, 9));
        assert_eq!(cfg.out.unwrap(), dir.join("res"));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Options>("shape = \"16x16x16\"\nwarp = 3\n").is_err());
    }

    #[test]
    fn default_group_is_clipped() {
        let cfg = Options::default().resolve().unwrap();
        assert_eq!(cfg.group_for(16, 16), GroupSpec::new(16, 4));
        assert_eq!(cfg.group_for(4096, 4096), GroupSpec::new(32, 4));
    }

    #[test]
    fn inconsistent_settings_fail() {
        let o = Options {
            bits: Some(2),
            dup: Some(4),
            dp: Some(16),
            ..Options::default()
        };
        assert!(o.resolve().is_ok());
        let o = Options {
            dp: Some(5),
            ..Options::default()
        };
        assert!(o.resolve().is_err());
    }
}
