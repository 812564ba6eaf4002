//! Simulates layered Brownian bridges for one Gaussian factor and compares
//! the Poisson (GPE-1) and negative-binomial (GPE-2) estimators of the path
//! weight `E[exp(−∫φ)]` over one interval: mean, spread and number of
//! interior points evaluated.
//!
//! Run with `cargo run --release --example path_estimators`.

use std::sync::Arc;

use dcfusion::bridge::{sample_bridge_points, simulate_layer};
use dcfusion::estimator::{estimate_factor, EstimatorConfig, EstimatorKind};
use dcfusion::prelude::*;
use rand::SeedableRng;

fn main() -> Result<()> {
    let model: Arc<dyn SubPosteriorModel> = Arc::new(GaussianModel::univariate(0.0, 1.0)?);
    let factor = Factor::new(model, Matrix::from_element(1, 1, 1.0), Vector::zeros(1))?;
    let (x_s, x_t) = (Vector::from_element(1, 1.5), Vector::from_element(1, -1.0));
    let mut rng = FusionRng::seed_from_u64(5);

    // One layer and a few exact interior points inside it.
    let layer = simulate_layer(&x_s, &x_t, 0.0, 1.0, factor.lambda_sqrt.clone(), 0.5, &mut rng)?;
    let points = sample_bridge_points(&layer, &[0.25, 0.5, 0.75], &mut rng)?;
    println!("layer level {:?}, box [{:.3}, {:.3}]", layer.level, layer.lo[0], layer.hi[0]);
    println!("interior points: {:.3?}", points.iter().map(|p| p[0]).collect::<Vec<_>>());

    for kind in [EstimatorKind::Gpe1, EstimatorKind::Gpe2] {
        let cfg = EstimatorConfig { kind, ..EstimatorConfig::default() };
        let draws = 50_000;
        let (mut sum, mut sum_sq, mut evaluations) = (0.0, 0.0, 0usize);
        for _ in 0..draws {
            let e = estimate_factor(&factor, &x_s, &x_t, 0.0, 1.0, &cfg, &mut rng)?;
            let w = e.log_rho.exp();
            sum += w;
            sum_sq += w * w;
            evaluations += e.kappa;
        }
        let mean = sum / draws as f64;
        let sd = (sum_sq / draws as f64 - mean * mean).max(0.0).sqrt();
        println!(
            "{kind:?}: mean = {mean:.4} ± {:.4}, sd = {sd:.4}, φ evaluations per draw = {:.2}",
            sd / (draws as f64).sqrt(),
            evaluations as f64 / draws as f64
        );
    }
    Ok(())
}
