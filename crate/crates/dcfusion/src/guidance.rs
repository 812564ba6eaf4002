//! Choosing the time horizon `T` and the temporal mesh.
//!
//! The rules keep the conditional effective sample size of the initial
//! weights above `ζ` and of every per-interval weight above `ζ′`. The
//! quantities involved are the data size `m`, the sub-posterior scale `b`
//! (default `m/C`), the number of factors `C`, and the dimension `d`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FusionError, Result};
use crate::linalg::{Matrix, Preconditioner, Vector};
use crate::smc::{ParticleCloud, TemporalMesh};

/// Heterogeneity regime assumed for the sub-posterior means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Regime {
    /// Sub-posterior homogeneity with constant `λ`.
    Sh { lambda: f64 },
    /// Super sub-posterior heterogeneity with constant `γ`; estimated from
    /// the mean hints when `None`.
    Ssh { gamma: Option<f64> },
}

impl Default for Regime {
    fn default() -> Self {
        Regime::Sh { lambda: 1.0 }
    }
}

/// User-facing guidance settings, turned into a [`GuidanceContext`] for each
/// fusion call.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSettings {
    /// Floor `ζ` for the initial conditional ESS fraction.
    pub zeta: f64,
    /// Floor `ζ′` for every per-interval conditional ESS fraction.
    pub zeta_prime: f64,
    pub regime: Regime,
    /// Total data size `m`; only the ratio `b/m` matters when `b` defaults.
    pub data_size: Option<f64>,
    /// Scale `b`; defaults to `m/C` for each fusion call.
    pub b: Option<f64>,
    /// Overrides the recommended `T` when set.
    pub time_horizon: Option<f64>,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        Self { zeta: 0.5, zeta_prime: 0.5, regime: Regime::default(), data_size: None, b: None, time_horizon: None }
    }
}

/// Everything the tuning rules need for one fusion call.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceContext {
    pub c: usize,
    pub d: usize,
    pub m: f64,
    pub b: f64,
    pub zeta: f64,
    pub zeta_prime: f64,
    /// Resolved regime (SSH `γ` always present).
    pub regime: Regime,
}

const DEFAULT_DATA_SIZE: f64 = 1000.0;

fn check_zeta(z: f64) -> Result<()> {
    if z > 0.0 && z < 1.0 {
        Ok(())
    } else {
        Err(FusionError::BadZeta(z))
    }
}

impl GuidanceSettings {
    /// Validates and resolves the settings for a call fusing `c` factors in
    /// dimension `d` with the given mean hints and preconditioners.
    pub fn context(&self, c: usize, d: usize, mean_hints: &[Vector], lambdas: &[Matrix]) -> Result<GuidanceContext> {
        check_zeta(self.zeta)?;
        check_zeta(self.zeta_prime)?;
        let m = self.data_size.unwrap_or(DEFAULT_DATA_SIZE);
        let b = self.b.unwrap_or(m / c as f64);
        if !(m > 0.0 && b > 0.0) {
            return Err(FusionError::config("guidance", "data_size and b must be positive"));
        }
        let regime = match self.regime {
            Regime::Sh { lambda } => {
                if !(lambda > 0.0) {
                    return Err(FusionError::config("guidance.regime.lambda", "must be positive"));
                }
                Regime::Sh { lambda }
            }
            Regime::Ssh { gamma: Some(g) } => Regime::Ssh { gamma: Some(g) },
            Regime::Ssh { gamma: None } => {
                let s2 = sigma_a_sq(mean_hints, lambdas)?;
                Regime::Ssh { gamma: Some((m / c as f64) * s2 / b) }
            }
        };
        Ok(GuidanceContext { c, d, m, b, zeta: self.zeta, zeta_prime: self.zeta_prime, regime })
    }
}

/// `σ²_a = (1/C) Σ_c (a_c − ã)ᵀΛ_c⁻¹(a_c − ã)` with `ã` the weighted centre.
pub fn sigma_a_sq(mean_hints: &[Vector], lambdas: &[Matrix]) -> Result<f64> {
    check_dim(mean_hints.len(), lambdas.len())?;
    if mean_hints.is_empty() {
        return Err(FusionError::EmptyInput("mean hints"));
    }
    let center = crate::linalg::weighted_center(lambdas, mean_hints)?;
    let mut total = 0.0;
    for (a, l) in mean_hints.iter().zip(lambdas) {
        let r = a - &center;
        let inv = crate::linalg::spd_inverse(l)?;
        total += r.dot(&(inv * &r));
    }
    Ok(total / mean_hints.len() as f64)
}

/// Recommended time horizon `T`.
///
/// SH: `k₁ = √(−(λ + d/2)/log ζ)`, `T = bC^{3/2}k₁/m`.
/// SSH: `k₁ = √(−(γm/C + d/2)/log ζ)`, `k₂ = bCk₁/m`,
/// `T = max(bC^{3/2}k₁/m, √C·k₂)`.
pub fn recommend_t(ctx: &GuidanceContext) -> Result<f64> {
    check_zeta(ctx.zeta)?;
    let (c, d) = (ctx.c as f64, ctx.d as f64);
    let log_zeta = ctx.zeta.ln();
    match ctx.regime {
        Regime::Sh { lambda } => {
            let k1 = (-(lambda + d / 2.0) / log_zeta).sqrt();
            Ok(ctx.b * c.powf(1.5) * k1 / ctx.m)
        }
        Regime::Ssh { gamma } => {
            let gamma = gamma.ok_or_else(|| FusionError::config("guidance.regime.gamma", "unresolved"))?;
            let k1 = (-(gamma * ctx.m / c + d / 2.0) / log_zeta).sqrt();
            let k2 = ctx.b * c * k1 / ctx.m;
            Ok((ctx.b * c.powf(1.5) * k1 / ctx.m).max(c.sqrt() * k2))
        }
    }
}

/// Shortcut for the SH-regime `k₁`.
pub fn k1_sh(zeta: f64, lambda: f64, d: usize) -> Result<f64> {
    check_zeta(zeta)?;
    Ok((-(lambda + d as f64 / 2.0) / zeta.ln()).sqrt())
}

fn weighted_quadratic<'a>(
    weights: &[f64],
    points: impl Fn(usize) -> Vec<&'a Vector>,
    mean_hints: &[Vector],
    precs: &[&Preconditioner],
) -> f64 {
    let c = mean_hints.len() as f64;
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let pts = points(i);
            let s: f64 = pts.iter().zip(mean_hints).zip(precs).map(|((x, a), p)| p.mahalanobis_sq(&(*x - a))).sum();
            w * s / c
        })
        .sum()
}

/// `ν̂ = Σ_i w_i (1/C) Σ_c (x_i^(c) − a_c)ᵀΛ_c⁻¹(x_i^(c) − a_c)` on the
/// current (normalised) cloud.
pub fn nu_hat(cloud: &ParticleCloud, mean_hints: &[Vector], precs: &[&Preconditioner]) -> Result<f64> {
    check_dim(cloud.n_factors(), mean_hints.len())?;
    check_dim(cloud.n_factors(), precs.len())?;
    let w = cloud.weights();
    Ok(weighted_quadratic(&w, |i| cloud.positions[i].iter().collect(), mean_hints, precs))
}

/// `max{Ψ₁, Ψ₂}`: the weighted quadratic variation of the centres and of
/// the leaf positions about the mean hints on the initial cloud.
pub fn nu_sup_hat(cloud: &ParticleCloud, mean_hints: &[Vector], precs: &[&Preconditioner]) -> Result<f64> {
    let (psi1, psi2) = nu_sup_components(cloud, mean_hints, precs)?;
    Ok(psi1.max(psi2))
}

/// `(Ψ₁, Ψ₂)` separately.
pub fn nu_sup_components(
    cloud: &ParticleCloud,
    mean_hints: &[Vector],
    precs: &[&Preconditioner],
) -> Result<(f64, f64)> {
    check_dim(cloud.n_factors(), mean_hints.len())?;
    check_dim(cloud.n_factors(), precs.len())?;
    let w = cloud.weights();
    let c = mean_hints.len();
    let psi1 = weighted_quadratic(&w, |i| vec![&cloud.centers[i]; c], mean_hints, precs);
    let psi2 = weighted_quadratic(&w, |i| cloud.positions[i].iter().collect(), mean_hints, precs);
    Ok((psi1, psi2))
}

/// Smaller root of `k² + (2 log ζ′ − ν̂²m²/(2b²Cd))k + (log ζ′)² = 0`.
pub fn k4_choice(zeta_prime: f64, nu: f64, ctx: &GuidanceContext) -> Result<f64> {
    check_zeta(zeta_prime)?;
    let l = zeta_prime.ln();
    let a = nu * nu * ctx.m * ctx.m / (2.0 * ctx.b * ctx.b * ctx.c as f64 * ctx.d as f64);
    let s = a - 2.0 * l;
    let disc = (s * s - 4.0 * l * l).max(0.0);
    // Product of the roots is (log ζ′)²; dividing avoids cancellation.
    Ok(2.0 * l * l / (s + disc.sqrt()))
}

/// Interval length `√(b²Ck₄/(2m²d))`.
pub fn interval_for_k4(k4: f64, ctx: &GuidanceContext) -> f64 {
    (ctx.b * ctx.b * ctx.c as f64 * k4 / (2.0 * ctx.m * ctx.m * ctx.d as f64)).sqrt()
}

/// Regular mesh from the initial weighted cloud.
pub fn regular_mesh(
    t_end: f64,
    initial: &ParticleCloud,
    mean_hints: &[Vector],
    precs: &[&Preconditioner],
    ctx: &GuidanceContext,
) -> Result<TemporalMesh> {
    let nu = nu_sup_hat(initial, mean_hints, precs)?;
    let delta = interval_for_k4(k4_choice(ctx.zeta_prime, nu, ctx)?, ctx);
    TemporalMesh::regular(t_end, delta)
}

/// Next mesh time from the current cloud.
pub fn adaptive_next_interval(
    t_end: f64,
    t_prev: f64,
    cloud: &ParticleCloud,
    mean_hints: &[Vector],
    precs: &[&Preconditioner],
    ctx: &GuidanceContext,
) -> Result<f64> {
    let nu = nu_hat(cloud, mean_hints, precs)?;
    let delta = interval_for_k4(k4_choice(ctx.zeta_prime, nu, ctx)?, ctx);
    Ok(next_time(t_prev, delta, t_end))
}

/// `min(T, t_prev + Δ)`, snapping to `T` when within round-off.
pub(crate) fn next_time(t_prev: f64, delta: f64, t_end: f64) -> f64 {
    let t = t_prev + delta;
    if t >= t_end * (1.0 - 1e-12) {
        t_end
    } else {
        t
    }
}
