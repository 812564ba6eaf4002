//! Drives the JSON experiment layer: one configured run written to
//! `samples.csv`, `diagnostics.csv` and `summary.json`, then a small sweep
//! over `C` comparing methods, written to `bench.csv`.
//!
//! Run with `cargo run --release --example experiment_runner [out_dir]`.

use dcfusion::prelude::*;
use dcfusion::runner::{bench_sweep, parse_json, run_config, BenchConfig, ExperimentConfig};

fn main() -> Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/experiment_runner".into());
    let out = std::path::Path::new(&out);

    let config: ExperimentConfig = parse_json(
        r#"{"problem": {"kind": "gaussian-synthetic", "dim": 2, "spread": 0.5},
            "C": 4, "N": 5000, "seed": 1,
            "method": {"kind": "dcfusion", "tree": {"kind": "balanced-binary"}}}"#,
    )?;
    let summary = run_config(&config, out.join("single"))?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("serialisable summary"));

    let bench: BenchConfig = parse_json(
        r#"{"base": {"problem": {"kind": "gaussian-synthetic"}, "C": 4, "N": 4000, "seed": 2,
                     "mesh": {"kind": "fixed", "T": 1.0, "n": 1}},
            "sweep": {"C": [4, 8]},
            "methods": [{"kind": "dcfusion", "tree": {"kind": "fork-join"}},
                        {"kind": "dcfusion", "tree": {"kind": "balanced-binary"}},
                        {"kind": "cmc"}]}"#,
    )?;
    println!("{:<26} {:>3} {:>6} {:>8} {:>6}", "method", "C", "N", "IAD", "mesh");
    for row in bench_sweep(&bench, out.join("bench"))? {
        println!("{:<26} {:>3} {:>6} {:>8.4} {:>6}", row.method, row.c, row.n, row.iad.unwrap_or(f64::NAN), row.n_mesh);
    }
    println!("outputs under {}", out.display());
    Ok(())
}
