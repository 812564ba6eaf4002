//! Consensus Monte Carlo and the density metrics: merges draws from three
//! Gaussian sub-posteriors, fits a weighted KDE to one marginal, and scores
//! the merge by IAD against the analytic product.
//!
//! Run with `cargo run --release --example density_metrics`.

use dcfusion::metrics::{consensus_merge, iad, kde_1d, Reference};
use dcfusion::model::sample_gaussian;
use dcfusion::prelude::*;
use rand::SeedableRng;

fn main() -> Result<()> {
    let parts = [(-1.0, 2.0), (0.5, 1.0), (2.0, 4.0)];
    let mut rng = FusionRng::seed_from_u64(17);
    let subs = parts
        .iter()
        .map(|&(m, v)| sample_gaussian(&Vector::from_element(1, m), &Matrix::from_element(1, 1, v), 50_000, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let precision: f64 = parts.iter().map(|(_, v)| 1.0 / v).sum();
    let mean = parts.iter().map(|(m, v)| m / v).sum::<f64>() / precision;
    println!("analytic product: N({mean:.4}, {:.4})", 1.0 / precision);

    let merged = consensus_merge(&subs, None)?;
    let xs: Vec<f64> = merged.iter().map(|v| v[0]).collect();
    let kde = kde_1d(&xs, None)?;
    println!("KDE bandwidth = {:.4}, mode = {:.4}", kde.bandwidth(), kde.mode());

    let reference = Reference::Gaussian { mean: Vector::from_element(1, mean), cov: Matrix::from_element(1, 1, 1.0 / precision) };
    println!("IAD(consensus, product) = {:.4}", iad(&WeightedSamples::uniform(merged), &reference)?);
    let naive: Vec<Vector> = subs.concat();
    println!("IAD(pooled draws, product) = {:.4}", iad(&WeightedSamples::uniform(naive), &reference)?);
    Ok(())
}
