//! Initial weights and unbiased estimators of the per-interval path weights.
//!
//! Over an interval `[s, t]` the importance weight of a particle is
//! `∏_c exp(−∫_s^t φ_c(X_u^(c)) du)` along Brownian bridges between the
//! particle's positions. It is estimated without bias by sampling a layer for
//! each bridge, bounding `φ_c` on it by `[L, U]`, and evaluating `φ_c` at a
//! random number of uniformly placed bridge points. Two count laws are
//! provided: Poisson with mean `(U − L)Δ` and negative binomial with mean
//! `UΔ − ∫φ` along the chord.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bridge::{sample_bridge_points, simulate_layer, DEFAULT_LAYER_INCREMENT};
use crate::error::{check_dim, FusionError, Result};
use crate::linalg::{spd_inverse, CenterOperator, Matrix, Vector};
use crate::model::{Factor, PhiBounds};

/// Law of the auxiliary count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Poisson count with mean `(U − L)Δ`.
    Gpe1,
    /// Negative-binomial count with mean `UΔ − ∫φ` along the chord.
    Gpe2,
}

/// Estimator settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Negative-binomial size parameter `β`.
    pub nb_beta: f64,
    /// Number of trapezoid nodes used for the chord integral (≥ 2).
    pub trapezoid_points: usize,
    /// Floor `ε` applied to the negative-binomial mean.
    pub gamma_floor: f64,
    /// Layer increment in units of `√Δ`.
    pub layer_increment: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Gpe2,
            nb_beta: 10.0,
            trapezoid_points: 2,
            gamma_floor: 1e-8,
            layer_increment: DEFAULT_LAYER_INCREMENT,
        }
    }
}

impl EstimatorConfig {
    /// Validates the configuration.
    pub fn validate(&self) -> Result<()> {
        if !(self.nb_beta > 0.0) {
            return Err(FusionError::config("estimator.nb_beta", "must be positive"));
        }
        if self.trapezoid_points < 2 {
            return Err(FusionError::config("estimator.trapezoid_points", "must be at least 2"));
        }
        if !(self.gamma_floor > 0.0) {
            return Err(FusionError::config("estimator.gamma_floor", "must be positive"));
        }
        if !(self.layer_increment > 0.0) {
            return Err(FusionError::config("estimator.layer_increment", "must be positive"));
        }
        Ok(())
    }
}

/// `log ρ₀` from precomputed inverses and centre operator.
pub(crate) fn log_rho_zero_with(op: &CenterOperator, inverses: &[Matrix], positions: &[Vector], t: f64) -> Result<f64> {
    let center = op.center(positions)?;
    let mut q = 0.0;
    for (inv, x) in inverses.iter().zip(positions) {
        let r = &center - x;
        q += r.dot(&(inv * &r));
    }
    Ok(-q / (2.0 * t))
}

/// `ρ₀ = exp{−Σ_c (x̃ − x^(c))ᵀΛ_c⁻¹(x̃ − x^(c)) / (2T)}`.
pub fn rho_zero(positions: &[Vector], lambdas: &[Matrix], t: f64) -> Result<f64> {
    check_dim(lambdas.len(), positions.len())?;
    if !(t > 0.0) {
        return Err(FusionError::InvalidData("time horizon must be positive".into()));
    }
    let op = CenterOperator::new(lambdas)?;
    let inverses = lambdas.iter().map(spd_inverse).collect::<Result<Vec<_>>>()?;
    Ok(log_rho_zero_with(&op, &inverses, positions, t)?.exp())
}

/// Initial weight for leaves drawn from the re-centred densities
/// `f̃_c ∝ exp{−(x − θ̃)ᵀΛ_c⁻¹(x − θ̃)/(2T)} f_c`:
/// `exp{(x̃ − θ̃)ᵀΛ_C⁻¹(x̃ − θ̃)/(2T)}`.
pub fn rho_zero_centered(positions: &[Vector], lambdas: &[Matrix], t: f64, theta: &Vector) -> Result<f64> {
    check_dim(lambdas.len(), positions.len())?;
    let op = CenterOperator::new(lambdas)?;
    let center = op.center(positions)?;
    check_dim(center.len(), theta.len())?;
    let pooled_prec = spd_inverse(op.pooled())?;
    let r = center - theta;
    Ok((r.dot(&(pooled_prec * &r)) / (2.0 * t)).exp())
}

/// Negative-binomial mean `γ = UΔ − ∫φ` along the straight chord between the
/// endpoints (trapezoid rule), floored at `ε`.
pub fn nb_mean_gamma(
    factor: &Factor,
    x_left: &Vector,
    x_right: &Vector,
    t_left: f64,
    t_right: f64,
    upper: f64,
    cfg: &EstimatorConfig,
) -> f64 {
    let delta = t_right - t_left;
    let n = cfg.trapezoid_points.max(2);
    let mut integral = 0.0;
    for i in 0..n {
        let frac = i as f64 / (n - 1) as f64;
        let x = x_left + (x_right - x_left) * frac;
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        integral += w * factor.phi(&x);
    }
    integral *= delta / (n - 1) as f64;
    (upper * delta - integral).max(cfg.gamma_floor)
}

/// One factor's contribution to `log ρ̃` plus diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct FactorEstimate {
    pub log_rho: f64,
    pub kappa: usize,
    pub bounds: PhiBounds,
}

fn sorted_uniform_times(k: usize, s: f64, t: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let mut times: Vec<f64> = (0..k)
        .map(|_| loop {
            let u = s + (t - s) * rng.random::<f64>();
            if u > s && u < t {
                break u;
            }
        })
        .collect();
    times.sort_by(|a, b| a.total_cmp(b));
    times
}

/// Samples a negative-binomial count with mean `gamma` and size `beta` as a
/// Gamma–Poisson mixture.
pub fn sample_negative_binomial(gamma: f64, beta: f64, rng: &mut dyn RngCore) -> usize {
    let g = Gamma::new(beta, gamma / beta).expect("positive NB parameters");
    let lambda: f64 = g.sample(rng);
    sample_poisson(lambda, rng)
}

fn sample_poisson(lambda: f64, rng: &mut dyn RngCore) -> usize {
    if !(lambda > 0.0) {
        return 0;
    }
    let p = Poisson::new(lambda).expect("positive Poisson rate");
    let k: f64 = p.sample(rng);
    k as usize
}

/// Unbiased estimate of `exp(−∫_s^t φ(X_u) du)` for one factor, where `X` is
/// the Brownian bridge (covariance `Λ` per unit time) from `x_s` to `x_t`.
pub fn estimate_factor(
    factor: &Factor,
    x_s: &Vector,
    x_t: &Vector,
    s: f64,
    t: f64,
    cfg: &EstimatorConfig,
    rng: &mut dyn RngCore,
) -> Result<FactorEstimate> {
    let delta = t - s;
    let inv_sqrt = &factor.precond.inv_sqrt;
    let z_s = inv_sqrt * x_s;
    let z_t = inv_sqrt * x_t;
    let layer = simulate_layer(&z_s, &z_t, s, t, factor.lambda_sqrt.clone(), cfg.layer_increment, rng)?;
    let bounds = factor.phi_bounds(&layer.lo, &layer.hi)?;
    let (lower, upper) = (bounds.lower, bounds.upper);
    let (kappa, mut log_rho) = match cfg.kind {
        EstimatorKind::Gpe1 => {
            let k = sample_poisson((upper - lower) * delta, rng);
            (k, -lower * delta)
        }
        EstimatorKind::Gpe2 => {
            let gamma = nb_mean_gamma(factor, x_s, x_t, s, t, upper, cfg);
            let beta = cfg.nb_beta;
            let k = sample_negative_binomial(gamma, beta, rng);
            let kf = k as f64;
            let log_w = -upper * delta + kf * delta.ln() + ln_gamma(beta) + (beta + kf) * (beta + gamma).ln()
                - ln_gamma(beta + kf)
                - beta * beta.ln()
                - kf * gamma.ln();
            (k, log_w)
        }
    };
    if kappa > 0 {
        let times = sorted_uniform_times(kappa, s, t, rng);
        let points = sample_bridge_points(&layer, &times, rng)?;
        let slack = 1e-9 * (1.0 + upper.abs().max(lower.abs()));
        for z in points {
            let x = &*factor.lambda_sqrt * z;
            let phi = factor.phi(&x);
            if phi > upper + slack || phi < lower - slack {
                return Err(FusionError::BoundViolation { phi, lower, upper });
            }
            let gap = (upper - phi).max(0.0);
            log_rho += match cfg.kind {
                EstimatorKind::Gpe1 => (gap / (upper - lower)).ln(),
                EstimatorKind::Gpe2 => gap.ln(),
            };
        }
    }
    Ok(FactorEstimate { log_rho, kappa, bounds })
}

/// `log ρ̃` over `[s, t]` for one particle: the sum of per-factor estimates.
pub fn estimate_log_rho_tilde(
    factors: &[Factor],
    x_s: &[Vector],
    x_t: &[Vector],
    s: f64,
    t: f64,
    cfg: &EstimatorConfig,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    check_dim(factors.len(), x_s.len())?;
    check_dim(factors.len(), x_t.len())?;
    if !(t > s) {
        return Err(FusionError::InvalidData("estimator interval must have positive length".into()));
    }
    let mut total = 0.0;
    for ((f, a), b) in factors.iter().zip(x_s).zip(x_t) {
        total += estimate_factor(f, a, b, s, t, cfg, rng)?.log_rho;
    }
    Ok(total)
}

/// `ρ̃` over `[s, t]` for one particle (see [`estimate_log_rho_tilde`]).
pub fn estimate_rho_tilde(
    factors: &[Factor],
    x_s: &[Vector],
    x_t: &[Vector],
    s: f64,
    t: f64,
    cfg: &EstimatorConfig,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    Ok(estimate_log_rho_tilde(factors, x_s, x_t, s, t, cfg, rng)?.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaussianModel, SubPosteriorModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn unit_factor() -> Factor {
        let m: Arc<dyn SubPosteriorModel> = Arc::new(GaussianModel::univariate(0.0, 1.0).unwrap());
        Factor::new(m, Matrix::identity(1, 1), Vector::zeros(1)).unwrap()
    }

    fn v(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    #[test]
    fn rho_zero_examples() {
        let one = Matrix::identity(1, 1);
        assert_eq!(rho_zero(&[v(1.0), v(1.0)], &[one.clone(), one.clone()], 1.0).unwrap(), 1.0);
        let r = rho_zero(&[v(0.0), v(2.0)], &[one.clone(), one.clone()], 1.0).unwrap();
        assert!((r - (-1.0f64).exp()).abs() < 1e-15);
        let r = rho_zero(&[v(0.0), v(2.0)], &[one.clone(), one], 1e12).unwrap();
        assert!((r - 1.0).abs() < 1e-11);
    }

    #[test]
    fn rho_zero_centered_examples() {
        let one = Matrix::identity(1, 1);
        let r = rho_zero_centered(&[v(0.0), v(2.0)], &[one.clone(), one.clone()], 1.0, &v(1.0)).unwrap();
        assert_eq!(r, 1.0);
        let r = rho_zero_centered(&[v(0.0), v(2.0)], &[one.clone(), one], 1e12, &v(5.0)).unwrap();
        assert!((r - 1.0).abs() < 1e-10);
    }

    #[test]
    fn centered_product_identity() {
        // ϱ̃₀ ∏ f̃_c ∝ ρ₀ ∏ f_c: the log-ratio is constant across configurations.
        let lambdas = vec![Matrix::from_element(1, 1, 1.3), Matrix::from_element(1, 1, 0.7)];
        let theta = v(0.4);
        let t = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ratios = Vec::new();
        for _ in 0..100 {
            let xs = vec![v(rng.random::<f64>() * 4.0 - 2.0), v(rng.random::<f64>() * 4.0 - 2.0)];
            let tilt: f64 = xs
                .iter()
                .zip(&lambdas)
                .map(|(x, l)| -(x[0] - theta[0]).powi(2) / (l[(0, 0)] * 2.0 * t))
                .sum();
            let lhs = rho_zero_centered(&xs, &lambdas, t, &theta).unwrap().ln() + tilt;
            let rhs = rho_zero(&xs, &lambdas, t).unwrap().ln();
            ratios.push(lhs - rhs);
        }
        let spread = ratios.iter().fold(f64::MIN, |a, b| a.max(*b)) - ratios.iter().fold(f64::MAX, |a, b| a.min(*b));
        assert!(spread < 1e-10);
    }

    #[test]
    fn nb_gamma_examples() {
        let f = unit_factor();
        let cfg = EstimatorConfig::default();
        let g = nb_mean_gamma(&f, &v(0.0), &v(0.0), 0.0, 1.0, 0.0, &cfg);
        assert!((g - 0.5).abs() < 1e-15);
        // φ constant equal to U along the chord → floored.
        let g = nb_mean_gamma(&f, &v(1.0), &v(1.0), 0.0, 1.0, 0.0, &cfg);
        assert_eq!(g, cfg.gamma_floor);
    }

    #[test]
    fn nb_gamma_trapezoid_converges() {
        // φ(x) = ½(x² − 1) along the chord from 0.3 to 1.7 over Δ = 0.6.
        let f = unit_factor();
        let coarse = nb_mean_gamma(&f, &v(0.3), &v(1.7), 0.0, 0.6, 3.0, &EstimatorConfig::default());
        let fine_cfg = EstimatorConfig { trapezoid_points: 1001, ..EstimatorConfig::default() };
        let fine = nb_mean_gamma(&f, &v(0.3), &v(1.7), 0.0, 0.6, 3.0, &fine_cfg);
        // Trapezoid error for a quadratic: Δ h²/12 · |φ''| with h the chord span.
        let bound = 0.6 * 1.4f64.powi(2) / 12.0 + 1e-9;
        assert!((coarse - fine).abs() <= bound);
    }

    #[test]
    fn nb_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (gamma, beta) = (2.3, 10.0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_negative_binomial(gamma, beta, &mut rng) as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = gamma + gamma * gamma / beta;
        assert!((mean - gamma).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn gpe1_scaled_in_unit_interval() {
        let f = unit_factor();
        let cfg = EstimatorConfig { kind: EstimatorKind::Gpe1, ..EstimatorConfig::default() };
        let floor = f.phi_floor().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20_000 {
            let a = v(rng.random::<f64>() * 4.0 - 2.0);
            let b = v(rng.random::<f64>() * 4.0 - 2.0);
            let e = estimate_factor(&f, &a, &b, 0.0, 0.5, &cfg, &mut rng).unwrap();
            let scaled = e.log_rho + floor * 0.5;
            assert!(scaled <= 1e-12, "scaled log estimate {scaled}");
        }
    }

    #[test]
    fn gpe2_positive() {
        let f = unit_factor();
        let cfg = EstimatorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20_000 {
            let a = v(rng.random::<f64>() * 6.0 - 3.0);
            let b = v(rng.random::<f64>() * 6.0 - 3.0);
            let e = estimate_factor(&f, &a, &b, 0.0, 1.0, &cfg, &mut rng).unwrap();
            assert!(e.log_rho.is_finite());
        }
    }

    #[test]
    fn zero_count_gives_lower_bound_weight() {
        // With κ = 0 for GPE-1 the estimate is exactly e^{−LΔ}.
        let f = unit_factor();
        let cfg = EstimatorConfig { kind: EstimatorKind::Gpe1, ..EstimatorConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = false;
        for _ in 0..200 {
            let e = estimate_factor(&f, &v(0.0), &v(0.1), 0.0, 0.05, &cfg, &mut rng).unwrap();
            if e.kappa == 0 {
                assert!((e.log_rho + e.bounds.lower * 0.05).abs() < 1e-15);
                seen = true;
            }
        }
        assert!(seen);
    }
}
