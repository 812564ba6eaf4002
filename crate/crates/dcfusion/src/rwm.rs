//! Random-walk Metropolis leaf sampler.
//!
//! Stands in for an external MCMC engine at the leaves of a fusion tree. The
//! chain starts at the mode (found by damped Newton iterations using the
//! model's analytic derivatives), proposes from a Gaussian shaped by the
//! Laplace covariance at the mode, and adapts a global step scale towards the
//! optimal random-walk acceptance rate during burn-in.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::linalg::{spd_inverse, Matrix, Vector};
use crate::model::SubPosteriorModel;

/// Tuning of the random-walk Metropolis leaf sampler.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RwmConfig {
    /// Iterations discarded (and used for step-size adaptation) before sampling.
    pub burn_in: usize,
    /// Keep one draw every `thin` iterations after burn-in.
    pub thin: usize,
    /// Target acceptance rate for the step-size adaptation.
    pub target_accept: f64,
}

impl Default for RwmConfig {
    fn default() -> Self {
        Self { burn_in: 5000, thin: 5, target_accept: 0.234 }
    }
}

/// Output of a chain: the retained draws and the post-burn-in acceptance rate.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub draws: Vec<Vector>,
    pub acceptance_rate: f64,
}

/// Damped Newton ascent on the log-density; returns the best point found.
pub fn find_mode<M: SubPosteriorModel + ?Sized>(model: &M, start: Vector) -> Vector {
    let mut x = start;
    let mut fx = model.log_density(&x);
    for _ in 0..100 {
        let (g, h) = model.grad_hess(&x);
        let neg_h = -h;
        let step = match spd_inverse(&neg_h) {
            Ok(inv) => inv * &g,
            Err(_) => g.clone() * 1e-2,
        };
        let mut alpha = 1.0;
        let mut improved = false;
        while alpha > 1e-8 {
            let cand = &x + &step * alpha;
            let fc = model.log_density(&cand);
            if fc.is_finite() && fc >= fx {
                let gain = fc - fx;
                x = cand;
                fx = fc;
                improved = gain > 1e-12;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    x
}

/// Runs an adaptive random-walk Metropolis chain and returns `n` thinned draws.
pub fn run_chain<M: SubPosteriorModel + ?Sized>(
    model: &M,
    n: usize,
    rng: &mut dyn RngCore,
    cfg: &RwmConfig,
) -> Result<ChainOutput> {
    if n == 0 {
        return Err(FusionError::EmptyInput("requested zero leaf draws"));
    }
    let d = model.dim();
    let mut x = find_mode(model, Vector::zeros(d));
    let (_, h) = model.grad_hess(&x);
    let chol_factor = spd_inverse(&(-h))
        .ok()
        .and_then(|c| c.cholesky())
        .map(|c| c.l())
        .unwrap_or_else(|| Matrix::identity(d, d));
    let mut log_scale = (2.38 / (d as f64).sqrt()).ln();
    let mut fx = model.log_density(&x);
    if !fx.is_finite() {
        return Err(FusionError::NonFinite("log-density at chain start"));
    }

    let step = |x: &mut Vector, fx: &mut f64, scale: f64, rng: &mut dyn RngCore| -> bool {
        let noise = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cand = &*x + &chol_factor * noise * scale;
        let fc = model.log_density(&cand);
        let u: f64 = rng.random();
        if fc.is_finite() && u.ln() < fc - *fx {
            *x = cand;
            *fx = fc;
            true
        } else {
            false
        }
    };

    for it in 0..cfg.burn_in {
        let accepted = step(&mut x, &mut fx, log_scale.exp(), rng);
        let gain = 1.0 / ((it + 1) as f64).powf(0.6);
        log_scale += gain * ((accepted as u8 as f64) - cfg.target_accept);
    }

    let scale = log_scale.exp();
    let thin = cfg.thin.max(1);
    let mut draws = Vec::with_capacity(n);
    let mut accepted = 0usize;
    for _ in 0..n {
        for _ in 0..thin {
            accepted += step(&mut x, &mut fx, scale, rng) as usize;
        }
        draws.push(x.clone());
    }
    let acceptance_rate = accepted as f64 / (n * thin) as f64;
    if acceptance_rate < 1e-3 {
        return Err(FusionError::ChainDiverged { rate: acceptance_rate });
    }
    Ok(ChainOutput { draws, acceptance_rate })
}
