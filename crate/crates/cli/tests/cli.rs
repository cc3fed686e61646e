use std::path::Path;
use std::process::{Command, Output};

use pacq_cli::commands::sim_columns;
use pacq_core::quantpack::format::{read_weights, write_matrix};
use pacq_core::quantpack::WeightMatrix;
use pacq_core::Matrix;
use serde_json::Value;

fn pacq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacq"))
        .args(args)
        .output()
        .expect("run pacq")
}

fn ok(args: &[&str]) -> Output {
    let out = pacq(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn json_rows(bytes: &[u8]) -> Vec<Value> {
    let v: Value = serde_json::from_slice(bytes).unwrap();
    assert_eq!(v["schema_version"], 1);
    v["rows"].as_array().unwrap().clone()
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let out = out.to_str().unwrap();
        ok(&[
            "simulate", "--shape", "32x32x64", "--out", out, "--format", "json", "--trace",
        ]);
        ok(&[
            "gemm", "--shape", "32x48x64", "--seed", "17", "--bits", "2", "--out", out,
        ]);
        ok(&["sweep", "--axis", "dp", "--out", out]);
    }
    let names = [
        "simulate.json",
        "gemm.csv",
        "c.csv",
        "sweep.csv",
        "trace-npack-w4.txt",
        "trace-kpack-w4.txt",
        "trace-dequant-w4.txt",
    ];
    for name in names {
        assert_eq!(
            read(&dir.path().join("a").join(name)),
            read(&dir.path().join("b").join(name)),
            "{name}"
        );
    }
}

#[test]
fn seed_changes_operands() {
    let a = ok(&["gemm", "--seed", "1", "--format", "json"]);
    let dir = tempfile::tempdir().unwrap();
    let c = |seed: &str| {
        let out = dir.path().join(seed);
        ok(&["gemm", "--seed", seed, "--out", out.to_str().unwrap()]);
        read(&out.join("c.csv"))
    };
    assert_ne!(c("1"), c("2"));
    assert_eq!(json_rows(&a.stdout)[0]["verdict"], "PASS");
}

#[test]
fn gemm_verdicts() {
    for flow in ["dequant", "kpack", "npack"] {
        for bits in ["4", "2"] {
            let out = ok(&[
                "gemm", "--flow", flow, "--bits", bits, "--shape", "16x32x32", "--format", "json",
            ]);
            let row = &json_rows(&out.stdout)[0];
            assert_eq!(row["verdict"], "PASS", "{flow} {bits}");
            assert_eq!(row["mismatches"], 0);
        }
    }
    let out = ok(&["gemm", "--flow", "dequant", "--bits", "16", "--format", "json"]);
    assert_eq!(json_rows(&out.stdout)[0]["flow"], "dequant-w16");

    let out = ok(&["gemm", "--acc", "fp16", "--shape", "16x16x64", "--format", "json"]);
    let row = &json_rows(&out.stdout)[0];
    assert_eq!(row["verdict"], "MEASURED");
    assert!(row["max_ulp"].as_u64().is_some());
}

#[test]
fn verify_mul_single_width() {
    let out = ok(&["verify-mul", "--bits", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("2,61442,245768,0,"));
    assert!(lines[1].ends_with(",PASS"));
}

#[test]
fn usage_errors_exit_nonzero() {
    for args in [
        &["sweep", "--axis", "shape"][..],
        &["sweep", "--axis", "dup", "--values", ""],
        &["simulate", "--dp", "5"],
        &["simulate", "--shape", "10x16x16"],
        &["gemm", "--flow", "npack", "--bits", "16"],
        &["verify-mul", "--bits", "16"],
        &["simulate", "--group", "3x4", "--shape", "16x16x16"],
        &["simulate", "--trace"],
        &["simulate", "--bits", "3"],
    ] {
        let out = pacq(args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed no diagnostic");
    }
}

#[test]
fn config_file_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cost = dir.path().join("cost.toml");
    std::fs::write(&cost, "rf_access = 3.0\nstatic_per_cycle = 10.0\n").unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "shape = \"32x64x64\"\nflow = \"npack\"\nbits = 2\ngroup = \"16x8\"\ndup = 4\ndp = 8\nacc = \"wide\"\n\
         cost = \"cost.toml\"\nseed = 5\nformat = \"json\"\n",
    )
    .unwrap();
    let from_file = ok(&["--config", cfg.to_str().unwrap(), "simulate"]);
    let from_flags = ok(&[
        "simulate",
        "--shape",
        "32x64x64",
        "--flow",
        "npack",
        "--bits",
        "2",
        "--group",
        "16x8",
        "--dup",
        "4",
        "--dp",
        "8",
        "--acc",
        "wide",
        "--cost",
        cost.to_str().unwrap(),
        "--seed",
        "5",
        "--format",
        "json",
    ]);
    assert_eq!(from_file.stdout, from_flags.stdout);
    let rows = json_rows(&from_file.stdout);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["flow"], "npack-w2");
    assert_eq!(rows[0]["dp"], 8);

    // flags win over the file
    let over = ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "simulate",
        "--bits",
        "4",
        "--dup",
        "2",
    ]);
    assert!(String::from_utf8(over.stdout).unwrap().contains("npack-w4"));

    std::fs::write(&cfg, "shape = \"16x16x16\"\nwarps = 2\n").unwrap();
    assert!(!pacq(&["--config", cfg.to_str().unwrap(), "simulate"]).status.success());
}

#[test]
fn help_documents_every_column() {
    let help = String::from_utf8(ok(&["simulate", "--help"]).stdout).unwrap();
    for (name, _) in sim_columns() {
        assert!(help.contains(&format!("  {name} ")), "{name} missing from help");
    }
    let csv = ok(&["simulate"]).stdout;
    let header = String::from_utf8(csv).unwrap().lines().next().unwrap().to_string();
    let names: Vec<&str> = sim_columns().iter().map(|(n, _)| *n).collect();
    assert_eq!(header, names.join(","));
    for cmd in ["verify-mul", "quantize", "gemm", "sweep"] {
        let help = String::from_utf8(ok(&[cmd, "--help"]).stdout).unwrap();
        assert!(help.contains("Columns:"), "{cmd}");
    }
}

#[test]
fn simulate_reports_flows_and_ratios() {
    let out = ok(&["simulate", "--format", "json"]);
    let rows = json_rows(&out.stdout);
    let flows: Vec<&str> = rows.iter().map(|r| r["flow"].as_str().unwrap()).collect();
    assert_eq!(flows, ["dequant-w4", "kpack-w4", "npack-w4"]);
    assert_eq!(rows[1]["speedup_vs_kpack"], 1.0);
    assert_eq!(rows[2]["cycles"], 67);
    assert_eq!(rows[1]["cycles"], 131);
    assert!(rows[2]["edp_reduction_vs_kpack"].as_f64().unwrap() > 0.0);

    let fp16 = ok(&["simulate", "--bits", "16", "--format", "json"]);
    let rows = json_rows(&fp16.stdout);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["speedup_vs_kpack"], Value::Null);
}

#[test]
fn sweep_rows_follow_value_order() {
    let out = ok(&[
        "sweep",
        "--axis",
        "shape",
        "--values",
        "16x64x64,16x16x16",
        "--flow",
        "npack",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][..4], ["0", "shape", "16x64x64", "m16n64k64"]);
    assert_eq!(&rows[1][..4], ["1", "shape", "16x16x16", "m16n16k16"]);
}

#[test]
fn quantize_round_trips_and_reports_groups() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("w.pqf");
    ok(&[
        "gen-weights",
        "--shape",
        "16x128x128",
        "--seed",
        "3",
        "-o",
        src.to_str().unwrap(),
    ]);
    let dst = dir.path().join("w.pqw");
    let out = ok(&[
        "quantize",
        src.to_str().unwrap(),
        "-o",
        dst.to_str().unwrap(),
        "--group",
        "32x4",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 128);
    let p = read_weights(&mut std::fs::File::open(&dst).unwrap()).unwrap();
    assert_eq!(p.scales.shape(), (4, 32));
    for line in text.lines().skip(1) {
        let ratio: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(ratio <= 0.5 + 1.0 / 64.0, "{line}");
    }

    // the packed file drives gemm directly
    let g = ok(&[
        "gemm",
        "--shape",
        "16x128x128",
        "--weights",
        dst.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(json_rows(&g.stdout)[0]["verdict"], "PASS");
    let wrong = pacq(&["gemm", "--shape", "16x64x128", "--weights", dst.to_str().unwrap()]);
    assert!(!wrong.status.success());

    let kdst = dir.path().join("k.pqw");
    ok(&[
        "quantize",
        src.to_str().unwrap(),
        "-o",
        kdst.to_str().unwrap(),
        "--flow",
        "kpack",
        "--bits",
        "2",
        "--group",
        "g128",
    ]);
    let p = read_weights(&mut std::fs::File::open(&kdst).unwrap()).unwrap();
    assert_eq!(p.scales.shape(), (1, 128));
    assert_eq!(p.packed.spec.count(), 8);
}

#[test]
fn zero_matrix_quantizes_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("z.pqf");
    let mut buf = Vec::new();
    write_matrix(&mut buf, &WeightMatrix::new(Matrix::filled(32, 8, 0.0f32)).unwrap()).unwrap();
    std::fs::write(&src, buf).unwrap();
    let dst = dir.path().join("z.pqw");
    ok(&["quantize", src.to_str().unwrap(), "-o", dst.to_str().unwrap()]);
    let p = read_weights(&mut std::fs::File::open(&dst).unwrap()).unwrap();
    let q = p.to_quantized().unwrap();
    assert!(q.values.as_slice().iter().all(|&v| v == 0));
    assert!(p
        .scales
        .as_slice()
        .iter()
        .all(|&s| s == pacq_core::HalfBits::MIN_POSITIVE));
}
