//! Compares fusion hierarchies on `C = 16` factors `N(0, C)` whose product is
//! `N(0, 1)`: fork-join, balanced-binary, progressive and tempered trees,
//! each fused with the fixed single-interval mesh `{0, 1}`.
//!
//! Run with `cargo run --release --example fusion_trees`.

use std::sync::Arc;
use std::time::Instant;

use dcfusion::metrics::{iad, Reference};
use dcfusion::prelude::*;
use dcfusion::runner::Method;
use rand::SeedableRng;

fn main() -> Result<()> {
    let c = 16;
    let models: Vec<Arc<dyn SubPosteriorModel>> = (0..c)
        .map(|_| Ok(Arc::new(GaussianModel::univariate(0.0, c as f64)?) as Arc<dyn SubPosteriorModel>))
        .collect::<Result<_>>()?;
    let settings = DcSettings {
        gbf: GbfSettings { n_particles: 10_000, ..GbfSettings::default() },
        mesh: MeshPolicy::Fixed { t_end: 1.0, n: 1 },
    };
    let reference = Reference::Gaussian { mean: Vector::zeros(1), cov: Matrix::identity(1, 1) };

    println!("{:<24} {:>6} {:>6} {:>8} {:>9} {:>9}", "tree", "nodes", "depth", "IAD", "min CESS0", "time");
    for kind in [
        TreeKind::ForkJoin,
        TreeKind::BalancedBinary,
        TreeKind::Progressive,
        TreeKind::Tempered { inv_beta: 2 },
    ] {
        let tree = build_tree(kind, c)?;
        let start = Instant::now();
        let out = dc_fusion(&tree, &models, &settings, &mut FusionRng::seed_from_u64(7))?;
        let elapsed = start.elapsed();
        let min_cess0 =
            out.nodes.iter().filter_map(|n| n.initial_cess_fraction).fold(f64::INFINITY, f64::min);
        println!(
            "{:<24} {:>6} {:>6} {:>8.4} {:>9.3} {:>9.2?}",
            Method::Dcfusion { tree: kind }.label(),
            tree.n_internal(),
            tree.depth(),
            iad(&out.root.weighted(), &reference)?,
            min_cess0,
            elapsed
        );
    }
    Ok(())
}
