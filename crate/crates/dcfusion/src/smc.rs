//! The particle system: composition of the initial cloud, propagation of the
//! coalescing processes, resampling, the fusion sampler and the exact
//! rejection mode.
//!
//! Each particle carries one position per factor. Over `[s, t]` positions
//! move as a Gaussian transition centred between their current value and the
//! precision-weighted centre `x̃_s`. At the final time all positions collapse
//! onto a common `y ~ N(x̃_s, (T − s)Λ_C)`. Weights are kept in log space.
//!
//! Randomness inside an iteration comes from one stream per particle, derived
//! from a seed drawn from the master generator, so results are bit-identical
//! for any thread count.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FusionError, Result};
use crate::estimator::{estimate_factor, estimate_log_rho_tilde, log_rho_zero_with, EstimatorConfig, EstimatorKind};
use crate::guidance::{adaptive_next_interval, recommend_t, regular_mesh, GuidanceContext, GuidanceSettings};
use crate::linalg::{cholesky, spd_inverse, weighted_mean_cov, CenterOperator, Matrix, Preconditioner, Vector};
use crate::model::{Factor, SubPosteriorModel};
use crate::rwm::RwmConfig;
use crate::FusionRng;

/// Ordered times `0 = t₀ < … < t_n = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalMesh {
    times: Vec<f64>,
}

impl TemporalMesh {
    /// Validates `times` (starts at 0, strictly increasing, at least one interval).
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FusionError::config("mesh", "times must start at 0 and increase strictly"));
        }
        Ok(Self { times })
    }

    /// `n` equal intervals over `[0, T]`.
    pub fn uniform(t_end: f64, n: usize) -> Result<Self> {
        if n == 0 || !(t_end > 0.0) {
            return Err(FusionError::config("mesh", "need T > 0 and n ≥ 1"));
        }
        let mut times: Vec<f64> = (0..n).map(|j| t_end * j as f64 / n as f64).collect();
        times.push(t_end);
        Self::new(times)
    }

    /// `t_j = min(T, jΔ)` with `n = ⌈T/Δ⌉`.
    pub fn regular(t_end: f64, delta: f64) -> Result<Self> {
        if !(t_end > 0.0 && delta > 0.0) {
            return Err(FusionError::config("mesh", "need T > 0 and Δ > 0"));
        }
        let n = (t_end / delta).ceil().max(1.0) as usize;
        let mut times: Vec<f64> = (0..n).map(|j| (j as f64 * delta).min(t_end)).collect();
        times.push(t_end);
        times.dedup();
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// The degenerate mesh `{0}` of a fusion call that had nothing to fuse.
    pub fn trivial() -> Self {
        Self { times: vec![0.0] }
    }

    /// Final time `T`.
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("validated mesh")
    }

    /// Number of intervals `n`.
    pub fn n_intervals(&self) -> usize {
        self.times.len().saturating_sub(1)
    }
}

/// How the temporal mesh of a fusion call is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MeshPolicy {
    /// `n` equal intervals over `[0, T]`.
    Fixed {
        #[serde(rename = "T")]
        t_end: f64,
        n: usize,
    },
    /// An explicit list of times.
    Explicit { times: Vec<f64> },
    /// Recommended `T`, regular mesh from the initial cloud.
    GuidedRegular,
    /// Recommended `T`, interval sizes chosen from the current cloud.
    GuidedAdaptive,
}

/// Joint Gaussian transition used for interior steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    /// One shared `N(0, Λ_C)` draw plus independent `N(0, Λ_c)` draws.
    #[default]
    Decomposed,
    /// Cholesky factor of the full `Cd × Cd` covariance.
    Block,
}

/// Settings of one fusion call.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GbfSettings {
    /// Number of particles `N`.
    pub n_particles: usize,
    /// Resample when `ESS < resample_threshold · N`.
    pub resample_threshold: f64,
    pub estimator: EstimatorConfig,
    pub guidance: GuidanceSettings,
    pub propagation: Propagation,
    /// Leaf sampler tuning (non-Gaussian leaves).
    pub rwm: RwmConfig,
}

impl Default for GbfSettings {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            resample_threshold: 0.5,
            estimator: EstimatorConfig::default(),
            guidance: GuidanceSettings::default(),
            propagation: Propagation::default(),
            rwm: RwmConfig::default(),
        }
    }
}

/// Weighted draws with normalised weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSamples {
    pub samples: Vec<Vector>,
    pub weights: Vec<f64>,
}

impl WeightedSamples {
    /// Equally weighted draws.
    pub fn uniform(samples: Vec<Vector>) -> Self {
        let n = samples.len();
        Self { samples, weights: vec![1.0 / n as f64; n] }
    }

    /// Normalises non-negative `weights`.
    pub fn new(samples: Vec<Vector>, weights: Vec<f64>) -> Result<Self> {
        check_dim(samples.len(), weights.len())?;
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(FusionError::AllZeroWeights);
        }
        Ok(Self { samples, weights: weights.iter().map(|w| w / total).collect() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }

    /// Weighted mean and covariance.
    pub fn mean_cov(&self) -> Result<(Vector, Matrix)> {
        weighted_mean_cov(&self.samples, &self.weights)
    }

    /// `1/Σw²`.
    pub fn ess(&self) -> f64 {
        ess(&self.weights)
    }
}

/// One row of the per-iteration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub t_j: f64,
    pub cess: f64,
    pub ess: f64,
    pub resampled: bool,
    pub delta_j: f64,
}

/// Output of a fusion call: the time-`T` marginal with weights.
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub samples: Vec<Vector>,
    pub weights: Vec<f64>,
    pub diagnostics: Vec<IterationRecord>,
    pub mesh: TemporalMesh,
}

impl FusionResult {
    /// The weighted sample.
    pub fn weighted(&self) -> WeightedSamples {
        WeightedSamples { samples: self.samples.clone(), weights: self.weights.clone() }
    }

    /// Time horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.mesh.horizon()
    }

    /// `CESS₀ / N` (first diagnostics row).
    pub fn initial_cess_fraction(&self) -> Option<f64> {
        self.diagnostics.first().map(|r| r.cess / self.samples.len() as f64)
    }
}

/// Weighted particle system.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    /// `positions[i][c]` is factor `c`'s position in particle `i`.
    pub positions: Vec<Vec<Vector>>,
    /// Cached precision-weighted centres `x̃_i`.
    pub centers: Vec<Vector>,
    /// Log-weights (normalised after [`ParticleCloud::normalize`]).
    pub log_weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_factors(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    /// Log-sum-exp normalisation of the log-weights.
    pub fn normalize(&mut self) -> Result<()> {
        normalize_log_weights(&mut self.log_weights)
    }

    /// Normalised weights.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// `1/Σw²` of the normalised weights.
    pub fn ess(&self) -> f64 {
        ess(&self.weights())
    }
}

fn normalize_log_weights(lw: &mut [f64]) -> Result<()> {
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(FusionError::AllZeroWeights);
    }
    let lse = max + lw.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lw.iter_mut().for_each(|l| *l -= lse);
    Ok(())
}

/// `ESS = 1/Σw²` for normalised weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Conditional ESS of incremental weights `exp(log_increments)` given the
/// previous normalised weights: `N(Σ w ρ)²/Σ w ρ²`, which reduces to
/// `(Σρ)²/Σρ²` for uniform previous weights.
pub fn cess(prev_weights: &[f64], log_increments: &[f64]) -> Result<f64> {
    check_dim(prev_weights.len(), log_increments.len())?;
    let max = log_increments.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(FusionError::AllZeroWeights);
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for (w, l) in prev_weights.iter().zip(log_increments) {
        let r = (l - max).exp();
        s1 += w * r;
        s2 += w * r * r;
    }
    Ok(prev_weights.len() as f64 * s1 * s1 / s2)
}

/// Residual resampling: `⌊n_out·w_i⌋` deterministic copies, the remainder by
/// systematic resampling on the residual weights. Returns ancestor indices.
pub fn residual_resample_indices(weights: &[f64], n_out: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let n_out_f = n_out as f64;
    let mut idx = Vec::with_capacity(n_out);
    let mut residual = Vec::with_capacity(weights.len());
    for (i, w) in weights.iter().enumerate() {
        let expected = n_out_f * w;
        let copies = expected.floor() as usize;
        idx.extend(std::iter::repeat_n(i, copies));
        residual.push(expected - copies as f64);
    }
    let remaining = n_out.saturating_sub(idx.len());
    if remaining > 0 {
        let total: f64 = residual.iter().sum();
        let step = total / remaining as f64;
        let mut u = rng.random::<f64>() * step;
        let mut cum = 0.0;
        let mut i = 0;
        for _ in 0..remaining {
            while i + 1 < residual.len() && cum + residual[i] <= u {
                cum += residual[i];
                i += 1;
            }
            idx.push(i);
            u += step;
        }
    }
    idx.truncate(n_out);
    idx
}

/// Residually resamples the cloud to `n_out` equally weighted particles.
pub fn residual_resample_to(cloud: &ParticleCloud, n_out: usize, rng: &mut dyn RngCore) -> ParticleCloud {
    let idx = residual_resample_indices(&cloud.weights(), n_out, rng);
    let lw = -(n_out as f64).ln();
    ParticleCloud {
        positions: idx.iter().map(|&i| cloud.positions[i].clone()).collect(),
        centers: idx.iter().map(|&i| cloud.centers[i].clone()).collect(),
        log_weights: vec![lw; n_out],
    }
}

/// Residually resamples the cloud, keeping its size.
pub fn residual_resample(cloud: &ParticleCloud, rng: &mut dyn RngCore) -> ParticleCloud {
    residual_resample_to(cloud, cloud.len(), rng)
}

/// Precomputed quantities for propagating a fixed family of preconditioners.
#[derive(Debug, Clone)]
pub struct Propagator {
    op: CenterOperator,
    inverses: Vec<Matrix>,
    chol_factors: Vec<Matrix>,
    chol_pooled: Matrix,
    lambdas: Vec<Matrix>,
}

impl Propagator {
    pub fn new(lambdas: &[Matrix]) -> Result<Self> {
        let op = CenterOperator::new(lambdas)?;
        let inverses = lambdas.iter().map(spd_inverse).collect::<Result<Vec<_>>>()?;
        let chol_factors = lambdas.iter().map(|l| cholesky(l).map(|c| c.l())).collect::<Result<Vec<_>>>()?;
        let chol_pooled = cholesky(op.pooled())?.l();
        Ok(Self { op, inverses, chol_factors, chol_pooled, lambdas: lambdas.to_vec() })
    }

    pub fn n_factors(&self) -> usize {
        self.lambdas.len()
    }

    pub fn dim(&self) -> usize {
        self.chol_pooled.nrows()
    }

    /// `x̃` of one configuration.
    pub fn center(&self, positions: &[Vector]) -> Result<Vector> {
        self.op.center(positions)
    }

    /// `log ρ₀` of one configuration.
    pub fn log_rho_zero(&self, positions: &[Vector], t_end: f64) -> Result<f64> {
        log_rho_zero_with(&self.op, &self.inverses, positions, t_end)
    }

    /// Conditional mean `M^(c)` of each factor for a step `s → t`.
    pub fn step_means(&self, positions: &[Vector], center: &Vector, s: f64, t: f64, t_end: f64) -> Vec<Vector> {
        let (a, b) = ((t_end - t) / (t_end - s), (t - s) / (t_end - s));
        positions.iter().map(|x| x * a + center * b).collect()
    }

    /// Full `Cd × Cd` covariance of an interior step `s → t`.
    pub fn step_covariance(&self, s: f64, t: f64, t_end: f64) -> Matrix {
        let (c, d) = (self.n_factors(), self.dim());
        let delta = t - s;
        let cross = self.op.pooled() * (delta * delta / (t_end - s));
        let mut cov = Matrix::zeros(c * d, c * d);
        for i in 0..c {
            for j in 0..c {
                let mut block = cross.clone();
                if i == j {
                    block += &self.lambdas[i] * (delta * (t_end - t) / (t_end - s));
                }
                cov.view_mut((i * d, j * d), (d, d)).copy_from(&block);
            }
        }
        cov
    }

    fn normal(d: usize, rng: &mut dyn RngCore) -> Vector {
        Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Terminal draw `y ~ N(x̃_s, (T − s)Λ_C)`, copied into every slot.
    pub fn terminal(&self, center: &Vector, s: f64, t_end: f64, rng: &mut dyn RngCore) -> Vec<Vector> {
        let y = center + &self.chol_pooled * Self::normal(self.dim(), rng) * (t_end - s).sqrt();
        vec![y; self.n_factors()]
    }

    /// Interior step via one shared `ξ ~ N(0, Λ_C)` and per-factor
    /// `η^(c) ~ N(0, Λ_c)`.
    pub fn step_decomposed(
        &self,
        positions: &[Vector],
        center: &Vector,
        s: f64,
        t: f64,
        t_end: f64,
        rng: &mut dyn RngCore,
    ) -> Vec<Vector> {
        if t >= t_end {
            return self.terminal(center, s, t_end, rng);
        }
        let d = self.dim();
        let delta = t - s;
        let shared_scale = (delta * delta / (t_end - s)).sqrt();
        let own_scale = ((t_end - t) * delta / (t_end - s)).sqrt();
        let xi = &self.chol_pooled * Self::normal(d, rng) * shared_scale;
        self.step_means(positions, center, s, t, t_end)
            .into_iter()
            .zip(&self.chol_factors)
            .map(|(m, l)| m + &xi + l * Self::normal(d, rng) * own_scale)
            .collect()
    }

    /// Interior step from the block Cholesky factor `chol` of
    /// [`Propagator::step_covariance`].
    pub fn step_block(
        &self,
        positions: &[Vector],
        center: &Vector,
        s: f64,
        t: f64,
        t_end: f64,
        chol: &Matrix,
        rng: &mut dyn RngCore,
    ) -> Vec<Vector> {
        if t >= t_end {
            return self.terminal(center, s, t_end, rng);
        }
        let (c, d) = (self.n_factors(), self.dim());
        let noise = chol * Self::normal(c * d, rng);
        self.step_means(positions, center, s, t, t_end)
            .into_iter()
            .enumerate()
            .map(|(i, m)| m + noise.rows(i * d, d))
            .collect()
    }
}

/// Per-particle random stream for iteration seed `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> FusionRng {
    let mut r = FusionRng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn propagate_cloud(
    cloud: &ParticleCloud,
    prop: &Propagator,
    s: f64,
    t: f64,
    t_end: f64,
    kind: Propagation,
    rng: &mut dyn RngCore,
) -> Result<ParticleCloud> {
    let seed: u64 = rng.random();
    let chol = match kind {
        Propagation::Block if t < t_end => Some(cholesky(&prop.step_covariance(s, t, t_end))?.l()),
        _ => None,
    };
    let moved: Vec<(Vec<Vector>, Vector)> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let mut r = stream_rng(seed, i as u64);
            let pos = match &chol {
                Some(l) => prop.step_block(&cloud.positions[i], &cloud.centers[i], s, t, t_end, l, &mut r),
                None => prop.step_decomposed(&cloud.positions[i], &cloud.centers[i], s, t, t_end, &mut r),
            };
            let c = prop.center(&pos)?;
            Ok((pos, c))
        })
        .collect::<Result<_>>()?;
    let (positions, centers) = moved.into_iter().unzip();
    Ok(ParticleCloud { positions, centers, log_weights: cloud.log_weights.clone() })
}

/// Moves every particle from `s` to `t` with the block form of the
/// transition (positions only; weights untouched).
pub fn propagate_step(
    cloud: &ParticleCloud,
    s: f64,
    t: f64,
    t_end: f64,
    lambdas: &[Matrix],
    rng: &mut dyn RngCore,
) -> Result<ParticleCloud> {
    check_step(s, t, t_end)?;
    propagate_cloud(cloud, &Propagator::new(lambdas)?, s, t, t_end, Propagation::Block, rng)
}

/// Moves every particle from `s` to `t` with the decomposed form of the
/// transition (positions only; weights untouched).
pub fn propagate_decomposed(
    cloud: &ParticleCloud,
    s: f64,
    t: f64,
    t_end: f64,
    lambdas: &[Matrix],
    rng: &mut dyn RngCore,
) -> Result<ParticleCloud> {
    check_step(s, t, t_end)?;
    propagate_cloud(cloud, &Propagator::new(lambdas)?, s, t, t_end, Propagation::Decomposed, rng)
}

fn check_step(s: f64, t: f64, t_end: f64) -> Result<()> {
    if s < t && t <= t_end {
        Ok(())
    } else {
        Err(FusionError::InvalidData(format!("invalid step {s} → {t} with horizon {t_end}")))
    }
}

/// Initial cloud before any resampling, with `CESS₀`.
fn initial_cloud(leaves: &[WeightedSamples], prop: &Propagator, t_end: f64) -> Result<(ParticleCloud, f64)> {
    let m = leaves.iter().map(WeightedSamples::len).min().unwrap_or(0);
    if m == 0 {
        return Err(FusionError::EmptyInput("leaf samples"));
    }
    let d = prop.dim();
    for l in leaves {
        check_dim(d, l.dim())?;
    }
    let rows: Vec<(Vec<Vector>, Vector, f64, f64)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let pos: Vec<Vector> = leaves.iter().map(|l| l.samples[i].clone()).collect();
            let log_w: f64 = leaves.iter().map(|l| l.weights[i].ln()).sum();
            let center = prop.center(&pos)?;
            let lr0 = prop.log_rho_zero(&pos, t_end)?;
            Ok((pos, center, log_w, lr0))
        })
        .collect::<Result<_>>()?;
    let mut prior_lw: Vec<f64> = rows.iter().map(|r| r.2).collect();
    normalize_log_weights(&mut prior_lw)?;
    let prior_w: Vec<f64> = prior_lw.iter().map(|l| l.exp()).collect();
    let lr0: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let cess0 = cess(&prior_w, &lr0)?;
    let mut cloud = ParticleCloud {
        log_weights: rows.iter().map(|r| r.2 + r.3).collect(),
        positions: Vec::with_capacity(m),
        centers: Vec::with_capacity(m),
    };
    for (p, c, _, _) in rows {
        cloud.positions.push(p);
        cloud.centers.push(c);
    }
    cloud.normalize()?;
    Ok((cloud, cess0))
}

/// Pairs the leaf draws index-wise (sub-sampling to the smallest count),
/// weights by `∏ w^(c) · ρ₀`, normalises, and resamples to `n` particles
/// when the count differs.
pub fn compose_initial_cloud(
    leaves: &[WeightedSamples],
    lambdas: &[Matrix],
    t_end: f64,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<ParticleCloud> {
    check_dim(lambdas.len(), leaves.len())?;
    let prop = Propagator::new(lambdas)?;
    let (cloud, _) = initial_cloud(leaves, &prop, t_end)?;
    Ok(if cloud.len() != n { residual_resample_to(&cloud, n, rng) } else { cloud })
}

fn resolve_horizon(mesh: &MeshPolicy, ctx: Option<&GuidanceContext>, guidance: &GuidanceSettings) -> Result<f64> {
    match mesh {
        MeshPolicy::Fixed { t_end, .. } => Ok(*t_end),
        MeshPolicy::Explicit { times } => Ok(TemporalMesh::new(times.clone())?.horizon()),
        MeshPolicy::GuidedRegular | MeshPolicy::GuidedAdaptive => match guidance.time_horizon {
            Some(t) => Ok(t),
            None => recommend_t(ctx.expect("guided policies build a context")),
        },
    }
}

/// Generalised Bayesian Fusion of `factors`, started from their weighted
/// leaf draws.
pub fn gbf(
    factors: &[Factor],
    leaves: &[WeightedSamples],
    mesh: &MeshPolicy,
    settings: &GbfSettings,
    rng: &mut FusionRng,
) -> Result<FusionResult> {
    let first = factors.first().ok_or(FusionError::EmptyInput("factors"))?;
    check_dim(factors.len(), leaves.len())?;
    let d = first.dim();
    for f in factors {
        check_dim(d, f.dim())?;
    }
    settings.estimator.validate()?;
    if settings.n_particles == 0 {
        return Err(FusionError::config("n_particles", "must be positive"));
    }
    let n = settings.n_particles;
    let lambdas: Vec<Matrix> = factors.iter().map(|f| f.precond.lambda.clone()).collect();
    let hints: Vec<Vector> = factors.iter().map(|f| f.mean_hint.clone()).collect();
    let precs: Vec<&Preconditioner> = factors.iter().map(|f| &*f.precond).collect();
    let guided = matches!(mesh, MeshPolicy::GuidedRegular | MeshPolicy::GuidedAdaptive);
    let ctx = if guided { Some(settings.guidance.context(factors.len(), d, &hints, &lambdas)?) } else { None };
    let t_end = resolve_horizon(mesh, ctx.as_ref(), &settings.guidance)?;
    if !(t_end > 0.0) {
        return Err(FusionError::config("mesh", "time horizon must be positive"));
    }

    let prop = Propagator::new(&lambdas)?;
    let (mut cloud, cess0) = initial_cloud(leaves, &prop, t_end)?;
    let fixed_mesh = match mesh {
        MeshPolicy::Fixed { t_end, n } => Some(TemporalMesh::uniform(*t_end, *n)?),
        MeshPolicy::Explicit { times } => Some(TemporalMesh::new(times.clone())?),
        MeshPolicy::GuidedRegular => {
            Some(regular_mesh(t_end, &cloud, &hints, &precs, ctx.as_ref().expect("guided"))?)
        }
        MeshPolicy::GuidedAdaptive => None,
    };
    let mut resampled = false;
    if cloud.len() != n {
        cloud = residual_resample_to(&cloud, n, rng);
        resampled = true;
    }
    let mut diagnostics =
        vec![IterationRecord { iter: 0, t_j: 0.0, cess: cess0, ess: cloud.ess(), resampled, delta_j: 0.0 }];
    let mut times = vec![0.0];
    let mut t_prev = 0.0;
    let mut iter = 0;
    while t_prev < t_end {
        iter += 1;
        let resampled = cloud.ess() < settings.resample_threshold * n as f64;
        if resampled {
            cloud = residual_resample(&cloud, rng);
        }
        let t_next = match &fixed_mesh {
            Some(m) => m.times()[iter],
            None => adaptive_next_interval(t_end, t_prev, &cloud, &hints, &precs, ctx.as_ref().expect("guided"))?,
        };
        let moved = propagate_cloud(&cloud, &prop, t_prev, t_next, t_end, settings.propagation, rng)?;
        let seed: u64 = rng.random();
        let log_inc: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = stream_rng(seed, i as u64);
                estimate_log_rho_tilde(
                    factors,
                    &cloud.positions[i],
                    &moved.positions[i],
                    t_prev,
                    t_next,
                    &settings.estimator,
                    &mut r,
                )
            })
            .collect::<Result<_>>()?;
        let prev_w = cloud.weights();
        let cess_j = cess(&prev_w, &log_inc)?;
        cloud = moved;
        for (lw, li) in cloud.log_weights.iter_mut().zip(&log_inc) {
            *lw += li;
        }
        cloud.normalize()?;
        diagnostics.push(IterationRecord {
            iter,
            t_j: t_next,
            cess: cess_j,
            ess: cloud.ess(),
            resampled,
            delta_j: t_next - t_prev,
        });
        log::debug!("iteration {iter}: t={t_next:.4} cess/N={:.3} ess/N={:.3}", cess_j / n as f64, cloud.ess() / n as f64);
        times.push(t_next);
        t_prev = t_next;
    }
    let weights = cloud.weights();
    let samples = cloud.positions.into_iter().map(|mut p| p.swap_remove(0)).collect();
    Ok(FusionResult { samples, weights, diagnostics, mesh: TemporalMesh::new(times)? })
}

/// Samples `n` leaf draws for every model (one random stream per model),
/// builds factors from their sample moments and runs [`gbf`].
pub fn fuse_models(
    models: &[Arc<dyn SubPosteriorModel>],
    settings: &GbfSettings,
    mesh: &MeshPolicy,
    rng: &mut FusionRng,
) -> Result<FusionResult> {
    let seed: u64 = rng.random();
    let leaves = models
        .iter()
        .enumerate()
        .map(|(c, m)| {
            let mut r = stream_rng(seed, c as u64);
            Ok(WeightedSamples::uniform(m.sample(settings.n_particles, &mut r, &settings.rwm)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let factors = models
        .iter()
        .zip(&leaves)
        .map(|(m, l)| Factor::from_samples(m.clone(), &l.samples, &l.weights))
        .collect::<Result<Vec<_>>>()?;
    gbf(&factors, &leaves, mesh, settings, rng)
}

/// Output of the exact rejection sampler.
#[derive(Debug, Clone)]
pub struct McfOutput {
    pub samples: Vec<Vector>,
    pub acceptance_rate: f64,
    pub proposals: u64,
}

/// Exact rejection sampler: a single interval `[0, T]`, identity
/// preconditioners, and acceptance probability `ρ₀ · ∏_c e^{Φ_c T} ρ̃_c` with
/// the Poisson estimator. Requires every model to have a known global floor
/// `Φ_c` of `φ_c` (the Gaussian family).
pub fn mcf_rejection(
    models: &[Arc<dyn SubPosteriorModel>],
    t_end: f64,
    n_accept: usize,
    estimator: &EstimatorConfig,
    rng: &mut FusionRng,
) -> Result<McfOutput> {
    const MAX_PROPOSALS: u64 = 10_000_000;
    let first = models.first().ok_or(FusionError::EmptyInput("models"))?;
    let d = first.dim();
    let cfg = EstimatorConfig { kind: EstimatorKind::Gpe1, ..estimator.clone() };
    let mut factors = Vec::with_capacity(models.len());
    let mut samplers = Vec::with_capacity(models.len());
    for m in models {
        check_dim(d, m.dim())?;
        let (mean, cov) = m
            .gaussian_params()
            .ok_or_else(|| FusionError::config("method", "rejection mode needs models with a known φ floor"))?;
        samplers.push((mean.clone(), cholesky(&cov)?.l()));
        factors.push(Factor::new(m.clone(), Matrix::identity(d, d), mean)?);
    }
    let floors: Vec<f64> = factors.iter().map(|f| f.phi_floor().expect("Gaussian floor")).collect();
    let prop = Propagator::new(&vec![Matrix::identity(d, d); models.len()])?;
    let mut samples = Vec::with_capacity(n_accept);
    let mut proposals = 0u64;
    while samples.len() < n_accept {
        proposals += 1;
        let xs: Vec<Vector> = samplers.iter().map(|(m, l)| m + l * Propagator::normal(d, rng)).collect();
        let center = prop.center(&xs)?;
        let mut log_acc = prop.log_rho_zero(&xs, t_end)?;
        let y = prop.terminal(&center, 0.0, t_end, rng).swap_remove(0);
        for ((f, x), floor) in factors.iter().zip(&xs).zip(&floors) {
            log_acc += estimate_factor(f, x, &y, 0.0, t_end, &cfg, rng)?.log_rho + floor * t_end;
        }
        if log_acc > 1e-9 {
            return Err(FusionError::InvalidData(format!("acceptance probability {} exceeds 1", log_acc.exp())));
        }
        if rng.random::<f64>().ln() < log_acc {
            samples.push(y);
        }
        if proposals >= MAX_PROPOSALS && (samples.len() as f64) < 1e-6 * proposals as f64 {
            return Err(FusionError::AcceptanceStarvation {
                rate: samples.len() as f64 / proposals as f64,
                proposals,
            });
        }
    }
    Ok(McfOutput { acceptance_rate: n_accept as f64 / proposals as f64, samples, proposals })
}
