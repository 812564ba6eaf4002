//! Fuses four `N(0, 4)` factors into their product `N(0, 1)` with a single
//! fusion, guided time horizon and adaptive mesh, and reports the weighted
//! moments, diagnostics and IAD against the analytic target.
//!
//! Run with `cargo run --release --example gaussian_fusion`.

use std::sync::Arc;
use std::time::Instant;

use dcfusion::metrics::{iad, Reference};
use dcfusion::prelude::*;
use rand::SeedableRng;

fn main() -> Result<()> {
    let c = 4;
    let models: Vec<Arc<dyn SubPosteriorModel>> =
        (0..c).map(|_| Ok(Arc::new(GaussianModel::univariate(0.0, c as f64)?) as Arc<dyn SubPosteriorModel>)).collect::<Result<_>>()?;
    let settings = GbfSettings { n_particles: 10_000, ..GbfSettings::default() };
    let mut rng = FusionRng::seed_from_u64(2024);

    let start = Instant::now();
    let out = fuse_models(&models, &settings, &MeshPolicy::GuidedAdaptive, &mut rng)?;
    let elapsed = start.elapsed();

    let ws = out.weighted();
    let (mean, cov) = ws.mean_cov()?;
    println!("T = {:.4}, {} intervals, {:.2?}", out.horizon(), out.mesh.n_intervals(), elapsed);
    for r in &out.diagnostics {
        println!(
            "  iter {:>2}  t = {:.4}  CESS/N = {:.3}  ESS/N = {:.3}  resampled = {}",
            r.iter,
            r.t_j,
            r.cess / settings.n_particles as f64,
            r.ess / settings.n_particles as f64,
            r.resampled
        );
    }
    let reference = Reference::Gaussian { mean: Vector::zeros(1), cov: Matrix::identity(1, 1) };
    println!("mean = {:.4}, variance = {:.4}, IAD = {:.4}", mean[0], cov[(0, 0)], iad(&ws, &reference)?);
    Ok(())
}
