//! Splits simulated logistic-regression data across `C = 4` shards and
//! compares balanced-binary divide-and-conquer fusion with consensus Monte
//! Carlo, both scored by IAD against a long random-walk Metropolis run on the
//! full data.
//!
//! Run with `cargo run --release --example logistic_regression`.

use std::time::Instant;

use dcfusion::metrics::iad;
use dcfusion::prelude::*;
use dcfusion::runner::{parse_json, reference_for, run_method, ExperimentConfig, Method};
use rand::SeedableRng;

fn main() -> Result<()> {
    let config: ExperimentConfig = parse_json(
        r#"{
            "problem": {"kind": "logistic-synthetic", "m": 1000},
            "C": 4, "N": 4000, "seed": 11,
            "guidance": {"zeta": 0.2, "zeta_prime": 0.05},
            "reference_draws": 40000
        }"#,
    )?;
    let seed = config.validate()?;
    let built = config.problem.build(config.c, seed)?;
    let reference = reference_for(&built, &config, seed)?.expect("regression problems have a reference");

    for method in [Method::Dcfusion { tree: TreeKind::BalancedBinary }, Method::Cmc] {
        let start = Instant::now();
        let out = run_method(&method, &built.models, &config, &mut FusionRng::seed_from_u64(seed))?;
        let (mean, _) = out.samples.mean_cov()?;
        println!(
            "{:<26} IAD = {:.4}  intervals = {:>3}  time = {:.2?}",
            method.label(),
            iad(&out.samples, &reference)?,
            out.n_mesh,
            start.elapsed()
        );
        println!("  posterior mean = {:.3?}", mean.as_slice());
    }
    Ok(())
}
