//! Consensus Monte Carlo, weighted one-dimensional kernel density estimates
//! and the integrated absolute distance (IAD) between marginals.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{check_dim, FusionError, Result};
use crate::linalg::{spd_inverse, weighted_mean_cov, Matrix, Vector};
use crate::smc::WeightedSamples;

/// Number of grid points of a [`Kde1D`].
pub const KDE_GRID_POINTS: usize = 512;
/// Minimum effective sample size accepted by [`kde_1d`].
pub const KDE_MIN_EFFECTIVE: f64 = 10.0;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Consensus Monte Carlo: `merged_i = (Σ W_c)⁻¹ Σ W_c x_i^(c)`.
///
/// `weights` defaults to the inverse sample covariance of each factor's
/// draws.
pub fn consensus_merge(sub_samples: &[Vec<Vector>], weights: Option<&[Matrix]>) -> Result<Vec<Vector>> {
    let first = sub_samples.first().ok_or(FusionError::EmptyInput("sub-posterior samples"))?;
    let n = first.len();
    for s in sub_samples {
        if s.len() != n {
            return Err(FusionError::CountMismatch(n, s.len()));
        }
    }
    if n == 0 {
        return Err(FusionError::EmptyInput("sub-posterior samples"));
    }
    let w: Vec<Matrix> = match weights {
        Some(w) => {
            check_dim(sub_samples.len(), w.len())?;
            w.to_vec()
        }
        None => sub_samples
            .iter()
            .map(|s| {
                let uniform = vec![1.0 / n as f64; n];
                spd_inverse(&weighted_mean_cov(s, &uniform)?.1)
            })
            .collect::<Result<_>>()?,
    };
    let d = first[0].len();
    let mut total = Matrix::zeros(d, d);
    for m in &w {
        check_dim(d, m.nrows())?;
        total += m;
    }
    let total_inv = spd_inverse(&total)?;
    let maps: Vec<Matrix> = w.iter().map(|m| &total_inv * m).collect();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = Vector::zeros(d);
            for (map, s) in maps.iter().zip(sub_samples) {
                acc += map * &s[i];
            }
            acc
        })
        .collect())
}

/// Gaussian-kernel density estimate of a weighted one-dimensional sample.
#[derive(Debug, Clone)]
pub struct Kde1D {
    points: Vec<f64>,
    weights: Vec<f64>,
    bandwidth: f64,
    grid: Vec<f64>,
    density: Vec<f64>,
}

impl Kde1D {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Support grid (data range ± 3 bandwidths).
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Density on [`Kde1D::grid`].
    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Density at `x`.
    pub fn evaluate(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let s: f64 = self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| {
                let z = (x - p) / h;
                w * (-0.5 * z * z).exp()
            })
            .sum();
        s * INV_SQRT_2PI / h
    }

    /// Density at every point of `xs`.
    pub fn evaluate_many(&self, xs: &[f64]) -> Vec<f64> {
        xs.par_iter().map(|&x| self.evaluate(x)).collect()
    }

    /// Location of the largest grid density.
    pub fn mode(&self) -> f64 {
        let (i, _) = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.grid[i]
    }
}

fn weighted_quantile(sorted: &[(f64, f64)], q: f64) -> f64 {
    let mut cum = 0.0;
    for &(x, w) in sorted {
        cum += w;
        if cum >= q {
            return x;
        }
    }
    sorted.last().map_or(0.0, |p| p.0)
}

/// Weighted KDE with bandwidth `0.9·min(sd, IQR/1.34)·n_eff^{−1/5}`,
/// `n_eff = 1/Σw²`. Equal (or absent) weights give the unweighted estimate.
pub fn kde_1d(samples: &[f64], weights: Option<&[f64]>) -> Result<Kde1D> {
    let n = samples.len();
    if n == 0 {
        return Err(FusionError::TooFewSamples(0.0));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(FusionError::NonFinite("KDE sample"));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.iter().any(|v| *v != w[0]) => {
            check_dim(n, w.len())?;
            let total: f64 = w.iter().sum();
            if !(total > 0.0) || w.iter().any(|v| *v < 0.0) {
                return Err(FusionError::AllZeroWeights);
            }
            w.iter().map(|v| v / total).collect()
        }
        Some(w) => {
            check_dim(n, w.len())?;
            if !(w[0] > 0.0) {
                return Err(FusionError::AllZeroWeights);
            }
            vec![1.0 / n as f64; n]
        }
        None => vec![1.0 / n as f64; n],
    };
    let n_eff = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    if n_eff < KDE_MIN_EFFECTIVE {
        return Err(FusionError::TooFewSamples(n_eff));
    }
    let mean: f64 = samples.iter().zip(&w).map(|(x, w)| w * x).sum();
    let var: f64 = samples.iter().zip(&w).map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>()
        / (1.0 - 1.0 / n_eff).max(f64::EPSILON);
    let sd = var.sqrt();
    let mut sorted: Vec<(f64, f64)> = samples.iter().copied().zip(w.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let iqr = weighted_quantile(&sorted, 0.75) - weighted_quantile(&sorted, 0.25);
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        (false, true) => iqr / 1.34,
        (false, false) => 1e-6 * mean.abs().max(1.0),
    };
    let bandwidth = 0.9 * spread * n_eff.powf(-0.2);
    let (lo, hi) = (sorted[0].0 - 3.0 * bandwidth, sorted[n - 1].0 + 3.0 * bandwidth);
    let grid: Vec<f64> =
        (0..KDE_GRID_POINTS).map(|i| lo + (hi - lo) * i as f64 / (KDE_GRID_POINTS - 1) as f64).collect();
    let mut kde = Kde1D { points: samples.to_vec(), weights: w, bandwidth, grid, density: Vec::new() };
    kde.density = kde.evaluate_many(&kde.grid);
    Ok(kde)
}

/// Trapezoid rule over a (sorted) grid.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}

/// A marginal density `θ ↦ f(θ)` for one coordinate.
pub type MarginalDensity = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Reference side of an IAD computation.
#[derive(Clone)]
pub enum Reference {
    /// Analytic Gaussian; marginals are read off the mean and covariance.
    Gaussian { mean: Vector, cov: Matrix },
    /// Analytic marginals, one per dimension.
    Marginals(Vec<MarginalDensity>),
    /// Reference draws, turned into KDEs.
    Samples(WeightedSamples),
}

impl std::fmt::Debug for Reference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reference::Gaussian { mean, cov } => f.debug_struct("Gaussian").field("mean", mean).field("cov", cov).finish(),
            Reference::Marginals(m) => write!(f, "Marginals({})", m.len()),
            Reference::Samples(s) => write!(f, "Samples({})", s.len()),
        }
    }
}

/// Normal density.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    INV_SQRT_2PI / var.sqrt() * (-0.5 * (x - mean).powi(2) / var).exp()
}

fn coordinate(samples: &WeightedSamples, j: usize) -> Vec<f64> {
    samples.samples.iter().map(|x| x[j]).collect()
}

fn union_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = a.iter().chain(b).copied().collect();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Half-L1 distance between a KDE and an analytic density, integrated on the
/// KDE grid; analytic mass outside the grid counts fully.
fn iad_kde_vs_density(kde: &Kde1D, f: &(dyn Fn(f64) -> f64 + Sync)) -> f64 {
    let grid = kde.grid();
    let fv: Vec<f64> = grid.par_iter().map(|&x| f(x)).collect();
    let diff: Vec<f64> = kde.density().iter().zip(&fv).map(|(a, b)| (a - b).abs()).collect();
    let outside = (1.0 - trapezoid(grid, &fv)).max(0.0);
    0.5 * (trapezoid(grid, &diff) + outside)
}

/// Half-L1 distance between two KDEs on the union of their grids.
fn iad_kde_vs_kde(a: &Kde1D, b: &Kde1D) -> f64 {
    let grid = union_grid(a.grid(), b.grid());
    let fa = a.evaluate_many(&grid);
    let fb = b.evaluate_many(&grid);
    let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).collect();
    0.5 * trapezoid(&grid, &diff)
}

/// Half-L1 distance between two densities, trapezoid on `n` points of `[lo, hi]`.
pub fn iad_densities(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| (f(x) - g(x)).abs()).collect();
    (0.5 * trapezoid(&xs, &ys)).clamp(0.0, 1.0)
}

/// Integrated absolute distance: the per-dimension half-L1 distance between
/// KDE marginals of `approx` and the reference marginals, averaged over
/// dimensions. Always within `[0, 1]`.
pub fn iad(approx: &WeightedSamples, reference: &Reference) -> Result<f64> {
    let d = approx.dim();
    if d == 0 {
        return Err(FusionError::EmptyInput("samples"));
    }
    let per_dim: Vec<f64> = (0..d)
        .map(|j| {
            let kde = kde_1d(&coordinate(approx, j), Some(&approx.weights))?;
            Ok(match reference {
                Reference::Gaussian { mean, cov } => {
                    check_dim(d, mean.len())?;
                    let (m, v) = (mean[j], cov[(j, j)]);
                    iad_kde_vs_density(&kde, &move |x| normal_pdf(x, m, v))
                }
                Reference::Marginals(fs) => {
                    check_dim(d, fs.len())?;
                    let f = fs[j].clone();
                    iad_kde_vs_density(&kde, &move |x| f(x))
                }
                Reference::Samples(r) => {
                    check_dim(d, r.dim())?;
                    iad_kde_vs_kde(&kde, &kde_1d(&coordinate(r, j), Some(&r.weights))?)
                }
            })
        })
        .collect::<Result<_>>()?;
    Ok((per_dim.iter().sum::<f64>() / d as f64).clamp(0.0, 1.0))
}

/// Kolmogorov–Smirnov statistic of unweighted draws against a CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
