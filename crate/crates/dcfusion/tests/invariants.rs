//! Property-based invariants of the building blocks.

use std::sync::Arc;

use dcfusion::bridge::{sample_bridge_points, simulate_layer, stay_probability};
use dcfusion::linalg::{Matrix, Vector};
use dcfusion::metrics::{kde_1d, trapezoid};
use dcfusion::model::{Factor, GaussianModel, SubPosteriorModel};
use dcfusion::smc::{cess, ess, residual_resample_indices};
use dcfusion::FusionRng;
use proptest::prelude::*;
use rand::SeedableRng;

fn weights_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..10.0, 1..60).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_resampling_keeps_floor_counts(weights in weights_strategy(), n in 1usize..200, seed in 0u64..1000) {
        let mut rng = FusionRng::seed_from_u64(seed);
        let idx = residual_resample_indices(&weights, n, &mut rng);
        prop_assert_eq!(idx.len(), n);
        let mut counts = vec![0usize; weights.len()];
        for i in idx {
            counts[i] += 1;
        }
        for (c, w) in counts.iter().zip(&weights) {
            prop_assert!(*c >= (n as f64 * w).floor() as usize);
            prop_assert!(*c as f64 <= (n as f64 * w).floor() + n as f64);
        }
    }

    #[test]
    fn ess_and_cess_lie_between_one_and_n(weights in weights_strategy(), shift in -5.0f64..5.0) {
        let n = weights.len() as f64;
        let e = ess(&weights);
        prop_assert!(e >= 1.0 - 1e-9 && e <= n + 1e-9);
        let incr: Vec<f64> = weights.iter().enumerate().map(|(i, _)| shift * (i as f64).sin()).collect();
        let c = cess(&weights, &incr).unwrap();
        // With non-uniform prior weights the floor is N·min w, not 1.
        let w_min = weights.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(c >= n * w_min * (1.0 - 1e-9) && c <= n * (1.0 + 1e-9));
        // Constant increments leave the conditional ESS at N.
        let flat = cess(&weights, &vec![shift; weights.len()]).unwrap();
        prop_assert!((flat - n).abs() < 1e-6 * n);
    }

    #[test]
    fn stay_probability_is_a_monotone_probability(
        x in -1.0f64..1.0, y in -1.0f64..1.0, tau in 0.05f64..3.0, a in 0.01f64..2.0, extra in 0.0f64..1.0
    ) {
        let (lo, hi) = (x.min(y) - a, x.max(y) + a);
        let p = stay_probability(x, y, lo, hi, tau).unwrap();
        let wider = stay_probability(x, y, lo - extra, hi + extra, tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(wider >= p - 1e-12);
    }

    #[test]
    fn bridge_points_stay_inside_their_layer(
        x in -2.0f64..2.0, y in -2.0f64..2.0, tau in 0.05f64..2.0, seed in 0u64..1000
    ) {
        let mut rng = FusionRng::seed_from_u64(seed);
        let sqrt = Arc::new(Matrix::identity(1, 1));
        let (zs, zt) = (Vector::from_element(1, x), Vector::from_element(1, y));
        let layer = simulate_layer(&zs, &zt, 0.0, tau, sqrt, 0.5, &mut rng).unwrap();
        let times: Vec<f64> = (1..6).map(|k| tau * k as f64 / 6.0).collect();
        for p in sample_bridge_points(&layer, &times, &mut rng).unwrap() {
            prop_assert!(layer.contains_whitened(&p));
        }
    }

    #[test]
    fn gaussian_phi_bounds_contain_phi(
        mean in -2.0f64..2.0, var in 0.2f64..5.0, lam in 0.2f64..5.0,
        lo in -3.0f64..3.0, width in 0.0f64..3.0, u in 0.0f64..1.0
    ) {
        let model: Arc<dyn SubPosteriorModel> = Arc::new(GaussianModel::univariate(mean, var).unwrap());
        let factor = Factor::new(model, Matrix::from_element(1, 1, lam), Vector::from_element(1, mean)).unwrap();
        let bounds = factor.phi_bounds(&[lo], &[lo + width]).unwrap();
        let z = lo + u * width;
        let phi = factor.phi(&Vector::from_element(1, lam.sqrt() * z));
        let slack = 1e-9 * (1.0 + bounds.upper.abs());
        prop_assert!(bounds.lower - slack <= phi && phi <= bounds.upper + slack);
        prop_assert!(phi >= factor.phi_floor().unwrap() - slack);
    }

    #[test]
    fn kde_integrates_to_one(seed in 0u64..1000, scale in 0.1f64..10.0) {
        use rand::Rng;
        let mut rng = FusionRng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..400).map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let kde = kde_1d(&xs, None).unwrap();
        let mass = trapezoid(kde.grid(), kde.density());
        prop_assert!((mass - 1.0).abs() < 0.01, "mass {}", mass);
    }
}
