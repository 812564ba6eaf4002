//! Exact and approximately-exact fusion of sub-posterior densities.
//!
//! Given factors `f_1, …, f_C`, each available only through a sampler and
//! analytic derivatives of `log f_c`, this crate draws weighted samples from
//! the product-pooled density `f ∝ ∏ f_c`. The method runs `C` coalescing
//! Brownian-type processes, started at sub-posterior draws, that meet at a
//! common time horizon `T`. Importance corrections for the paths are
//! estimated without bias from layered Brownian bridges, inside a sequential
//! Monte Carlo sampler over a temporal mesh.
//!
//! Module map:
//!
//! * [`linalg`] — PSD square roots, pooled precisions, precision-weighted centres.
//! * [`model`] — the factor contract, Gaussian / logistic / Student-t /
//!   negative-binomial families, tempering, and bounds on `φ` over layers.
//! * [`bridge`] — Brownian bridges with almost-sure layers and exact
//!   conditional interior points.
//! * [`estimator`] — the initial weight `ρ₀` and unbiased Poisson-type
//!   estimators of the per-interval path weights.
//! * [`smc`] — particle clouds, propagation, resampling, the fusion sampler
//!   and the exact rejection mode.
//! * [`guidance`] — the time horizon `T` and the regular / adaptive meshes.
//! * [`hierarchy`] — fusion trees and the recursive divide-and-conquer driver.
//! * [`metrics`] — consensus Monte Carlo, weighted KDE and the integrated
//!   absolute distance.
//! * [`runner`] — JSON-configured experiments and CSV/JSON outputs.
//!
//! ```
//! use std::sync::Arc;
//! use dcfusion::prelude::*;
//! use rand::SeedableRng;
//!
//! // Two unit Gaussians fuse to N(0, 1/2).
//! let models: Vec<Arc<dyn SubPosteriorModel>> = vec![
//!     Arc::new(GaussianModel::univariate(0.0, 1.0).unwrap()),
//!     Arc::new(GaussianModel::univariate(0.0, 1.0).unwrap()),
//! ];
//! let mut rng = FusionRng::seed_from_u64(1);
//! let settings = GbfSettings { n_particles: 2000, ..GbfSettings::default() };
//! let out = fuse_models(&models, &settings, &MeshPolicy::GuidedAdaptive, &mut rng).unwrap();
//! let mean: f64 = out.samples.iter().zip(&out.weights).map(|(x, w)| w * x[0]).sum();
//! assert!(mean.abs() < 0.1);
//! ```

pub mod bridge;
pub mod error;
pub mod estimator;
pub mod guidance;
pub mod hierarchy;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod rwm;
pub mod smc;

pub use error::{FusionError, Result};

/// Random number generator used throughout; streams are split per particle
/// so results do not depend on the thread count.
pub type FusionRng = rand_chacha::ChaCha8Rng;

/// Commonly used items.
pub mod prelude {
    pub use crate::error::{FusionError, Result};
    pub use crate::estimator::{EstimatorConfig, EstimatorKind};
    pub use crate::guidance::{GuidanceContext, Regime};
    pub use crate::hierarchy::{build_tree, dc_fusion, DcSettings, HierarchyNode, TreeKind};
    pub use crate::linalg::{Matrix, Vector};
    pub use crate::model::{
        temper, Factor, Family, GaussianModel, ProductModel, RegressionData, RegressionModel, SubPosteriorModel,
    };
    pub use crate::rwm::RwmConfig;
    pub use crate::smc::{fuse_models, gbf, FusionResult, GbfSettings, MeshPolicy, TemporalMesh, WeightedSamples};
    pub use crate::FusionRng;
}
