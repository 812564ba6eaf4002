//! Command-line driver for fusion experiments.
//!
//! Every subcommand reads a JSON configuration (`--config`) and writes its
//! outputs to `--out`. Verbosity is controlled by `FUSION_LOG`
//! (e.g. `FUSION_LOG=info`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcfusion::runner::{
    bench_sweep, iad_from_config, load_bench_config, load_config, parse_json, run_config, ExperimentConfig,
    IadConfig, Method,
};
use dcfusion::{hierarchy::TreeKind, Result};

#[derive(Parser)]
#[command(name = "dcfusion", version, about = "Fusion of sub-posterior densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured worker-thread count.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Single fusion of all factors.
    Fuse(Common),
    /// Divide-and-conquer fusion (tree from the config, balanced-binary by default).
    Dcfuse(Common),
    /// Exact rejection sampler (Gaussian problems).
    Mcf(Common),
    /// Consensus Monte Carlo baseline.
    Cmc(Common),
    /// Integrated absolute distance between a samples file and a reference.
    Iad(Common),
    /// Sweep over `C` or `N` for several methods.
    Bench(Common),
}

fn experiment(common: &Common, method: impl FnOnce(Method) -> Method) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&common.config)?;
    cfg.method = method(cfg.method);
    cfg.seed = common.seed.or(cfg.seed);
    cfg.threads = common.threads.or(cfg.threads);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fuse(c) => report(run_config(&experiment(&c, |_| Method::Gbf)?, &c.out)?),
        Command::Dcfuse(c) => {
            let cfg = experiment(&c, |m| match m {
                m @ Method::Dcfusion { .. } => m,
                _ => Method::Dcfusion { tree: TreeKind::BalancedBinary },
            })?;
            report(run_config(&cfg, &c.out)?)
        }
        Command::Mcf(c) => {
            let cfg = experiment(&c, |m| match m {
                m @ Method::Mcf { .. } => m,
                _ => Method::Mcf { t_end: 1.0 },
            })?;
            report(run_config(&cfg, &c.out)?)
        }
        Command::Cmc(c) => report(run_config(&experiment(&c, |_| Method::Cmc)?, &c.out)?),
        Command::Iad(c) => {
            let cfg: IadConfig = parse_json(&std::fs::read_to_string(&c.config)?)?;
            let value = iad_from_config(&cfg)?;
            std::fs::create_dir_all(&c.out)?;
            let json = serde_json::json!({ "iad": value });
            std::fs::write(c.out.join("summary.json"), format!("{json:#}\n"))?;
            println!("{value}");
            Ok(())
        }
        Command::Bench(c) => {
            let mut bench = load_bench_config(&c.config)?;
            bench.base.seed = c.seed.or(bench.base.seed);
            bench.base.threads = c.threads.or(bench.base.threads);
            let rows = bench_sweep(&bench, &c.out)?;
            println!("{} rows written to {}", rows.len(), c.out.join("bench.csv").display());
            Ok(())
        }
    }
}

fn report(summary: dcfusion::runner::RunSummary) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUSION_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
