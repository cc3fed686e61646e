//! Experiment driver for the packed-weight tensor core model.
//!
//! Every command shares the options in [`config::Options`], given as flags or
//! as keys of a TOML file passed with `--config`. Reports are CSV or JSON
//! (`schema_version` 1), written to `--out` or stdout. Identical options and
//! seed produce byte-identical files.

pub mod commands;
pub mod config;
pub mod gen;
pub mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::Axis;
use config::Options;
use report::columns_help;

#[derive(Debug, Parser)]
#[command(name = "pacq", version, about = "Packed-weight tensor core simulator")]
pub struct Cli {
    #[command(flatten)]
    pub opts: Options,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare every lane of the parallel multiplier with FP16 multiplication
    /// over all normal-or-zero activations and weight values. Exits 1 on any
    /// mismatch. Without --bits both widths are checked.
    #[command(after_long_help = columns_help("Columns", commands::VERIFY_COLUMNS))]
    VerifyMul,
    /// Write a seeded K x N matrix of uniform [-1, 1] weights (PQF1 format);
    /// K and N come from --shape.
    GenWeights {
        #[arg(short, long, value_name = "FILE")]
        output: PathBuf,
    },
    /// Round-to-nearest quantize a PQF1 matrix into a packed PQW1 file and
    /// report per-group errors. Packing is along k for --flow kpack and along
    /// n otherwise.
    #[command(after_long_help = columns_help("Columns", commands::QUANTIZE_COLUMNS))]
    Quantize {
        #[arg(value_name = "INPUT")]
        input: PathBuf,
        #[arg(short, long, value_name = "FILE")]
        output: PathBuf,
    },
    /// Run one GEMM on seeded operands and compare C with the exact oracle
    /// (single rounding of the exact sum). Under --acc wide any mismatch
    /// exits 1; under --acc fp16 the deviation is reported. With --out, C is
    /// written to c.csv.
    #[command(after_long_help = columns_help("Columns", commands::GEMM_COLUMNS))]
    Gemm {
        /// PQW1 weights to use instead of seeded ones
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
    },
    /// Count events, energy and EDP of the dequant, kpack and npack flows.
    /// --flow restricts the rows; ratios always use all flows.
    #[command(after_long_help = columns_help("Columns", &commands::sim_columns()))]
    Simulate {
        /// Also write trace-<flow>.txt event logs to --out
        #[arg(long)]
        trace: bool,
    },
    /// Repeat simulate over values of one parameter, one row per flow and
    /// point in the order given.
    #[command(after_long_help = columns_help("Columns", &commands::sweep_columns()))]
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values [default: dup 1,2,4; dp 4,8,16; bits 4,2]
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Option<Vec<String>>,
    },
}

/// Runs a parsed command line. `Ok(FAILURE)` means a verification failed.
pub fn run(cli: Cli) -> Result<ExitCode> {
    let merged = cli.opts.merged()?;
    let cfg = cli.opts.resolve()?;
    let out = cfg.out.as_deref();
    let meta = commands::config_json(&cfg);
    let status = |ok: bool| if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE };
    match cli.command {
        Command::VerifyMul => {
            let (t, ok) = commands::verify_mul(&commands::verify_widths(merged.bits)?)?;
            t.emit(out, cfg.format, &meta)?;
            Ok(status(ok))
        }
        Command::GenWeights { output } => {
            commands::gen_weights(&cfg, &output)?;
            eprintln!("wrote {}x{} weights to {}", cfg.shape.k, cfg.shape.n, output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Quantize { input, output } => {
            let (t, p) = commands::quantize(&cfg, &input, &output)?;
            let (gr, gc) = p.scales.shape();
            eprintln!(
                "wrote {} ({} {}-packed, {} scales as {gr}x{gc})",
                output.display(),
                p.bits(),
                commands::pack_name(p.packed.spec.dim),
                gr * gc
            );
            t.emit(out, cfg.format, &meta)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gemm { weights } => {
            let r = commands::gemm(&cfg, weights.as_deref())?;
            if let Some(dir) = out {
                report::write_file(&dir.join("c.csv"), &commands::matrix_csv(&r.c))?;
            }
            commands::gemm_table(&cfg, &r).emit(out, cfg.format, &meta)?;
            let wide = cfg.hw.accumulator == pacq_core::pmul::AccumulatorPolicy::WideExact;
            Ok(status(r.passed || !wide))
        }
        Command::Simulate { trace } => {
            let (t, _) = commands::simulate_table(&cfg)?;
            t.emit(out, cfg.format, &meta)?;
            if trace {
                match out {
                    Some(dir) => commands::write_traces(&cfg, dir)?,
                    None => anyhow::bail!("--trace needs --out"),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { axis, values } => {
            let values = values.unwrap_or_else(|| axis.default_values().iter().map(|s| s.to_string()).collect());
            commands::sweep(&cfg, axis, &values)?.emit(out, cfg.format, &meta)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
