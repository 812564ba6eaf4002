//! Sub-posterior models: the factor contract, the Gaussian and regression
//! families, tempering and products, and bounds on `φ` over bridge layers.
//!
//! A model only knows its own log-density and derivatives. The preconditioner
//! `Λ` is chosen by the caller (it differs between levels of a fusion tree),
//! so everything that depends on `Λ` — `φ`, its bounds and the mean hint used
//! by the tuning rules — lives on [`Factor`].

use std::fmt::Debug;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{check_dim, FusionError, Result};
use crate::linalg::{cholesky, spd_inverse, symmetrize, weighted_mean_cov, Matrix, Preconditioner, Vector};
use crate::rwm::{run_chain, RwmConfig};

/// Lower and upper bounds on `φ` over a region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiBounds {
    pub lower: f64,
    pub upper: f64,
}

/// Bounds on the whitened Hessian `Λ^{1/2} ∇²log f Λ^{1/2}` over a whitened box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianBound {
    /// Upper bound on the spectral norm.
    pub norm: f64,
    /// Lower bound on the trace.
    pub trace_lo: f64,
    /// Upper bound on the trace.
    pub trace_hi: f64,
}

impl HessianBound {
    /// Bound that only knows the norm; the trace lies in `[-d·P, d·P]`.
    pub fn from_norm(norm: f64, d: usize) -> Self {
        let t = d as f64 * norm;
        Self { norm, trace_lo: -t, trace_hi: t }
    }

    fn scaled(self, beta: f64) -> Self {
        Self { norm: self.norm * beta, trace_lo: self.trace_lo * beta, trace_hi: self.trace_hi * beta }
    }

    fn add(self, other: Self) -> Self {
        Self {
            norm: self.norm + other.norm,
            trace_lo: self.trace_lo + other.trace_lo,
            trace_hi: self.trace_hi + other.trace_hi,
        }
    }
}

/// Whitened-Hessian bounder specialised to one preconditioner.
pub trait HessianBounder: Send + Sync {
    /// Bounds valid for every `z` in the box `[lo, hi]` (whitened coordinates).
    fn bound(&self, lo: &[f64], hi: &[f64]) -> HessianBound;

    /// `(Λ^{1/2}∇log f, Tr(Λ∇²log f))` at `x = Λ^{1/2}z`, when the bounder can
    /// evaluate them without forming the Hessian.
    fn whitened_terms(&self, _z: &Vector) -> Option<(Vector, f64)> {
        None
    }
}

/// Behavioural contract for one factor `f_c` of the fusion density.
pub trait SubPosteriorModel: Send + Sync + Debug {
    /// Dimension of the parameter space.
    fn dim(&self) -> usize;

    /// `log f(x)` up to a model-specific additive constant.
    fn log_density(&self, x: &Vector) -> f64;

    /// Analytic gradient of `log f`.
    fn gradient(&self, x: &Vector) -> Vector;

    /// Analytic Hessian of `log f`.
    fn hessian(&self, x: &Vector) -> Matrix;

    /// Gradient and Hessian together (families override this to share work).
    fn grad_hess(&self, x: &Vector) -> (Vector, Matrix) {
        (self.gradient(x), self.hessian(x))
    }

    /// Builds a bounder for the whitened Hessian under `Λ^{1/2} = sqrt_lambda`.
    fn hessian_bounder(&self, sqrt_lambda: &Matrix) -> Result<Arc<dyn HessianBounder>>;

    /// Mean and covariance if the model is exactly Gaussian.
    fn gaussian_params(&self) -> Option<(Vector, Matrix)> {
        None
    }

    /// Draws `n` (approximately) independent samples from `f`.
    ///
    /// Gaussian models sample exactly; all others run a random-walk
    /// Metropolis chain.
    fn sample(&self, n: usize, rng: &mut dyn RngCore, cfg: &RwmConfig) -> Result<Vec<Vector>> {
        if let Some((mean, cov)) = self.gaussian_params() {
            return sample_gaussian(&mean, &cov, n, rng);
        }
        Ok(run_chain(self, n, rng, cfg)?.draws)
    }
}

/// Exact draws from `N(mean, cov)`.
pub fn sample_gaussian(mean: &Vector, cov: &Matrix, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Vector>> {
    if n == 0 {
        return Err(FusionError::EmptyInput("requested zero leaf draws"));
    }
    let l = cholesky(cov)?.l();
    let d = mean.len();
    Ok((0..n)
        .map(|_| {
            let z = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            mean + &l * z
        })
        .collect())
}

/// Checks a point's dimension against a model.
pub fn check_point(model: &dyn SubPosteriorModel, x: &Vector) -> Result<()> {
    check_dim(model.dim(), x.len())
}

// ---------------------------------------------------------------------------
// Gaussian family
// ---------------------------------------------------------------------------

/// Multivariate Gaussian factor `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    mean: Vector,
    cov: Matrix,
    precision: Matrix,
}

impl GaussianModel {
    /// Validates `cov` as SPD.
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        let precision = spd_inverse(&cov)?;
        Ok(Self { mean, cov: symmetrize(&cov), precision })
    }

    /// Univariate `N(mean, var)`.
    pub fn univariate(mean: f64, var: f64) -> Result<Self> {
        Self::new(Vector::from_element(1, mean), Matrix::from_element(1, 1, var))
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }
}

struct ConstantBounder(HessianBound);

impl HessianBounder for ConstantBounder {
    fn bound(&self, _lo: &[f64], _hi: &[f64]) -> HessianBound {
        self.0
    }
}

impl SubPosteriorModel for GaussianModel {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &Vector) -> f64 {
        let r = x - &self.mean;
        -0.5 * r.dot(&(&self.precision * &r))
    }

    fn gradient(&self, x: &Vector) -> Vector {
        -(&self.precision * (x - &self.mean))
    }

    fn hessian(&self, _x: &Vector) -> Matrix {
        -self.precision.clone()
    }

    fn hessian_bounder(&self, sqrt_lambda: &Matrix) -> Result<Arc<dyn HessianBounder>> {
        let w = symmetrize(&(sqrt_lambda * &self.precision * sqrt_lambda));
        let norm = crate::linalg::operator_norm(&w)?;
        let tr = -w.trace();
        Ok(Arc::new(ConstantBounder(HessianBound { norm, trace_lo: tr, trace_hi: tr })))
    }

    fn gaussian_params(&self) -> Option<(Vector, Matrix)> {
        Some((self.mean.clone(), self.cov.clone()))
    }
}

// ---------------------------------------------------------------------------
// Tempering and products
// ---------------------------------------------------------------------------

/// `f^β` for a base model `f`.
#[derive(Debug, Clone)]
pub struct TemperedModel {
    base: Arc<dyn SubPosteriorModel>,
    beta: f64,
}

/// Wraps `model` as `f^β`; `β = 1` returns the model unchanged.
pub fn temper(model: Arc<dyn SubPosteriorModel>, beta: f64) -> Result<Arc<dyn SubPosteriorModel>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(FusionError::BadBeta(beta));
    }
    if beta == 1.0 {
        return Ok(model);
    }
    Ok(Arc::new(TemperedModel { base: model, beta }))
}

struct ScaledBounder(Arc<dyn HessianBounder>, f64);

impl HessianBounder for ScaledBounder {
    fn bound(&self, lo: &[f64], hi: &[f64]) -> HessianBound {
        self.0.bound(lo, hi).scaled(self.1)
    }

    fn whitened_terms(&self, z: &Vector) -> Option<(Vector, f64)> {
        self.0.whitened_terms(z).map(|(v, tr)| (v * self.1, tr * self.1))
    }
}

impl TemperedModel {
    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl SubPosteriorModel for TemperedModel {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn log_density(&self, x: &Vector) -> f64 {
        self.beta * self.base.log_density(x)
    }
    fn gradient(&self, x: &Vector) -> Vector {
        self.base.gradient(x) * self.beta
    }
    fn hessian(&self, x: &Vector) -> Matrix {
        self.base.hessian(x) * self.beta
    }
    fn grad_hess(&self, x: &Vector) -> (Vector, Matrix) {
        let (g, h) = self.base.grad_hess(x);
        (g * self.beta, h * self.beta)
    }
    fn hessian_bounder(&self, sqrt_lambda: &Matrix) -> Result<Arc<dyn HessianBounder>> {
        Ok(Arc::new(ScaledBounder(self.base.hessian_bounder(sqrt_lambda)?, self.beta)))
    }
    fn gaussian_params(&self) -> Option<(Vector, Matrix)> {
        self.base.gaussian_params().map(|(m, c)| (m, c / self.beta))
    }
}

/// Product `∏ f_u` of several models (used for internal tree nodes).
#[derive(Debug, Clone)]
pub struct ProductModel {
    members: Vec<Arc<dyn SubPosteriorModel>>,
}

impl ProductModel {
    pub fn new(members: Vec<Arc<dyn SubPosteriorModel>>) -> Result<Self> {
        let first = members.first().ok_or(FusionError::EmptyInput("product of zero models"))?;
        let d = first.dim();
        for m in &members {
            check_dim(d, m.dim())?;
        }
        Ok(Self { members })
    }
}

struct SumBounder(Vec<Arc<dyn HessianBounder>>);

impl HessianBounder for SumBounder {
    fn bound(&self, lo: &[f64], hi: &[f64]) -> HessianBound {
        let mut it = self.0.iter();
        let first = it.next().expect("non-empty product").bound(lo, hi);
        it.fold(first, |acc, b| acc.add(b.bound(lo, hi)))
    }

    fn whitened_terms(&self, z: &Vector) -> Option<(Vector, f64)> {
        let mut it = self.0.iter();
        let first = it.next().expect("non-empty product").whitened_terms(z)?;
        it.try_fold(first, |(v, tr), b| b.whitened_terms(z).map(|(w, t)| (v + w, tr + t)))
    }
}

impl SubPosteriorModel for ProductModel {
    fn dim(&self) -> usize {
        self.members[0].dim()
    }
    fn log_density(&self, x: &Vector) -> f64 {
        self.members.iter().map(|m| m.log_density(x)).sum()
    }
    fn gradient(&self, x: &Vector) -> Vector {
        self.members.iter().fold(Vector::zeros(self.dim()), |acc, m| acc + m.gradient(x))
    }
    fn hessian(&self, x: &Vector) -> Matrix {
        let d = self.dim();
        self.members.iter().fold(Matrix::zeros(d, d), |acc, m| acc + m.hessian(x))
    }
    fn grad_hess(&self, x: &Vector) -> (Vector, Matrix) {
        let d = self.dim();
        self.members.iter().fold((Vector::zeros(d), Matrix::zeros(d, d)), |(g, h), m| {
            let (gm, hm) = m.grad_hess(x);
            (g + gm, h + hm)
        })
    }
    fn hessian_bounder(&self, sqrt_lambda: &Matrix) -> Result<Arc<dyn HessianBounder>> {
        let parts = self.members.iter().map(|m| m.hessian_bounder(sqrt_lambda)).collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(SumBounder(parts)))
    }
    fn gaussian_params(&self) -> Option<(Vector, Matrix)> {
        let d = self.dim();
        let mut prec = Matrix::zeros(d, d);
        let mut shift = Vector::zeros(d);
        for m in &self.members {
            let (mean, cov) = m.gaussian_params()?;
            let p = spd_inverse(&cov).ok()?;
            shift += &p * mean;
            prec += p;
        }
        let cov = spd_inverse(&prec).ok()?;
        Some((&cov * shift, cov))
    }
}

// ---------------------------------------------------------------------------
// Regression families
// ---------------------------------------------------------------------------

/// Design matrix, response and Gaussian prior of a regression sub-posterior.
#[derive(Debug, Clone)]
pub struct RegressionData {
    /// `n × (p+1)` design matrix, intercept column first.
    pub design: Matrix,
    /// Length-`n` response.
    pub response: Vector,
    /// Prior means `μ_j`.
    pub prior_mean: Vector,
    /// Prior variances (already including any fractional-prior scaling).
    pub prior_var: Vector,
}

impl RegressionData {
    /// Validates shapes and positivity of the prior variances.
    pub fn new(design: Matrix, response: Vector, prior_mean: Vector, prior_var: Vector) -> Result<Self> {
        check_dim(design.nrows(), response.len())?;
        check_dim(design.ncols(), prior_mean.len())?;
        check_dim(design.ncols(), prior_var.len())?;
        if design.nrows() == 0 {
            return Err(FusionError::EmptyInput("regression data has no rows"));
        }
        if prior_var.iter().any(|v| !(*v > 0.0)) {
            return Err(FusionError::InvalidData("prior variances must be positive".into()));
        }
        Ok(Self { design, response, prior_mean, prior_var })
    }

    /// Loads a CSV with a header row; the column named `y` is the response and
    /// every other column a feature. An intercept column is prepended. The
    /// prior is `N(0, prior_var)` on every coefficient.
    pub fn from_csv(path: impl AsRef<Path>, prior_var: f64) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let y_col = headers
            .iter()
            .position(|h| h.trim() == "y")
            .ok_or_else(|| FusionError::InvalidData("no column named `y`".into()))?;
        let p = headers.len() - 1;
        let mut rows: Vec<f64> = Vec::new();
        let mut ys = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| FusionError::InvalidData(format!("bad number `{s}`: {e}")))
            };
            rows.push(1.0);
            for (k, field) in rec.iter().enumerate() {
                if k == y_col {
                    ys.push(parse(field)?);
                } else {
                    rows.push(parse(field)?);
                }
            }
        }
        let n = ys.len();
        let design = Matrix::from_row_slice(n, p + 1, &rows);
        Self::new(design, Vector::from_vec(ys), Vector::zeros(p + 1), Vector::from_element(p + 1, prior_var))
    }

    /// Number of observations.
    pub fn len(&self) -> usize {
        self.response.len()
    }

    /// Whether there are no observations.
    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Splits rows into `c` contiguous shards of (almost) equal size, each with
    /// the prior variance multiplied by `c` so the shard priors multiply back
    /// to the original prior.
    pub fn split(&self, c: usize) -> Result<Vec<RegressionData>> {
        if c == 0 || c > self.len() {
            return Err(FusionError::InvalidData(format!("cannot split {} rows into {c} shards", self.len())));
        }
        let n = self.len();
        (0..c)
            .map(|k| {
                let start = k * n / c;
                let end = (k + 1) * n / c;
                let rows: Vec<usize> = (start..end).collect();
                RegressionData::new(
                    self.design.select_rows(&rows),
                    self.response.select_rows(&rows),
                    self.prior_mean.clone(),
                    &self.prior_var * c as f64,
                )
            })
            .collect()
    }
}

/// Observation model of a regression sub-posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// Bernoulli response with logit link.
    Logistic,
    /// Student-t errors with `nu` degrees of freedom and scale `sigma`.
    RobustT { nu: f64, sigma: f64 },
    /// Negative-binomial counts with size `r` and log link.
    NegBin { r: f64 },
}

/// Regression sub-posterior: likelihood of one data shard times its prior.
#[derive(Debug, Clone)]
pub struct RegressionModel {
    data: Arc<RegressionData>,
    family: Family,
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^s)` without overflow.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

impl RegressionModel {
    pub fn new(data: Arc<RegressionData>, family: Family) -> Result<Self> {
        match family {
            Family::Logistic => {
                if data.response.iter().any(|y| *y != 0.0 && *y != 1.0) {
                    return Err(FusionError::InvalidData("logistic response must be 0/1".into()));
                }
            }
            Family::NegBin { r } => {
                if !(r > 0.0) {
                    return Err(FusionError::InvalidData("negative-binomial size must be positive".into()));
                }
                if data.response.iter().any(|y| *y < 0.0 || y.fract() != 0.0) {
                    return Err(FusionError::InvalidData("negative-binomial response must be counts".into()));
                }
            }
            Family::RobustT { nu, sigma } => {
                if !(nu > 0.0 && sigma > 0.0) {
                    return Err(FusionError::InvalidData("student-t nu and sigma must be positive".into()));
                }
            }
        }
        Ok(Self { data, family })
    }

    pub fn data(&self) -> &RegressionData {
        &self.data
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// Per-observation log-likelihood contribution with respect to the
    /// linear predictor `η`.
    fn obs_log_lik(&self, eta: f64, y: f64) -> f64 {
        match self.family {
            Family::Logistic => y * eta - softplus(eta),
            Family::RobustT { nu, sigma } => {
                let r = y - eta;
                -0.5 * (nu + 1.0) * (r * r / (nu * sigma * sigma)).ln_1p()
            }
            // log(e^η + r) = log r + softplus(η − log r)
            Family::NegBin { r } => y * eta - (y + r) * (r.ln() + softplus(eta - r.ln())),
        }
    }

    fn prior_gradient(&self, x: &Vector) -> Vector {
        Vector::from_fn(x.len(), |j, _| -(x[j] - self.data.prior_mean[j]) / self.data.prior_var[j])
    }
}

/// First and second derivatives of one observation's log-likelihood with
/// respect to the linear predictor `η`.
fn obs_derivatives(family: Family, eta: f64, y: f64) -> (f64, f64) {
    match family {
        Family::Logistic => {
            let p = sigmoid(eta);
            (y - p, -p * (1.0 - p))
        }
        Family::RobustT { nu, sigma } => {
            let b = nu * sigma * sigma;
            let r = y - eta;
            let e = r * r;
            ((nu + 1.0) * r / (b + e), (nu + 1.0) * (e - b) / ((b + e) * (b + e)))
        }
        Family::NegBin { r } => {
            let q = sigmoid(eta - r.ln());
            (y - (y + r) * q, -(y + r) * q * (1.0 - q))
        }
    }
}

impl SubPosteriorModel for RegressionModel {
    fn dim(&self) -> usize {
        self.data.design.ncols()
    }

    fn log_density(&self, x: &Vector) -> f64 {
        let eta = &self.data.design * x;
        let ll: f64 = eta.iter().zip(self.data.response.iter()).map(|(e, y)| self.obs_log_lik(*e, *y)).sum();
        let prior: f64 = (0..x.len())
            .map(|j| {
                let r = x[j] - self.data.prior_mean[j];
                r * r / (2.0 * self.data.prior_var[j])
            })
            .sum();
        ll - prior
    }

    fn gradient(&self, x: &Vector) -> Vector {
        let eta = &self.data.design * x;
        let d1 = Vector::from_fn(eta.len(), |i, _| obs_derivatives(self.family, eta[i], self.data.response[i]).0);
        self.data.design.tr_mul(&d1) + self.prior_gradient(x)
    }

    fn hessian(&self, x: &Vector) -> Matrix {
        self.grad_hess(x).1
    }

    fn grad_hess(&self, x: &Vector) -> (Vector, Matrix) {
        let d = self.dim();
        let design = &self.data.design;
        let eta = design * x;
        let mut d1 = Vector::zeros(eta.len());
        let mut d2 = Vector::zeros(eta.len());
        for i in 0..eta.len() {
            let (a, b) = obs_derivatives(self.family, eta[i], self.data.response[i]);
            d1[i] = a;
            d2[i] = b;
        }
        let mut g = design.tr_mul(&d1);
        let mut scaled = design.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= d2[i];
        }
        let mut h = design.tr_mul(&scaled);
        for j in 0..d {
            g[j] -= (x[j] - self.data.prior_mean[j]) / self.data.prior_var[j];
            h[(j, j)] -= 1.0 / self.data.prior_var[j];
        }
        (g, symmetrize(&h))
    }

    fn hessian_bounder(&self, sqrt_lambda: &Matrix) -> Result<Arc<dyn HessianBounder>> {
        Ok(Arc::new(RegressionBounder::new(self, sqrt_lambda)?))
    }
}

/// Maximum over a box of `e^F/(e^F + r)²` for the affine form `F(z) = row·z`.
///
/// Evaluates `F` at the box centre and, depending on which side of `log r`
/// it falls, minimises or maximises `F` over the box; the result is capped at
/// `1/(4r)`, attained when `log r` lies in the range of `F`.
pub fn g_max(lo: &[f64], hi: &[f64], row: &[f64], r: f64) -> f64 {
    let (mut center, mut f_min, mut f_max) = (0.0, 0.0, 0.0);
    for k in 0..row.len() {
        let a = row[k];
        center += a * 0.5 * (lo[k] + hi[k]);
        if a >= 0.0 {
            f_min += a * lo[k];
            f_max += a * hi[k];
        } else {
            f_min += a * hi[k];
            f_max += a * lo[k];
        }
    }
    g_max_from_range(center, f_min, f_max, r)
}

/// `g_max` given the centre value and range of the affine form.
fn g_max_from_range(center: f64, f_min: f64, f_max: f64, r: f64) -> f64 {
    let log_r = r.ln();
    let extreme = if center >= log_r {
        if f_min <= log_r {
            return 0.25 / r;
        }
        f_min
    } else {
        if f_max >= log_r {
            return 0.25 / r;
        }
        f_max
    };
    let q = sigmoid(extreme - log_r);
    (q * (1.0 - q) / r).min(0.25 / r)
}

/// Element-wise bound on the whitened Hessian of a regression model.
///
/// With `A = XΛ^{1/2}` the data term is `Σ_i w_i(z) a_i a_iᵀ`; each weight is
/// bounded over the box (via [`g_max`] for logistic/negative-binomial and the
/// range of the squared residual for the Student-t family), giving a
/// non-negative matrix that dominates `|H|` entry-wise, whose largest
/// eigenvalue bounds the spectral norm. The prior adds the constant
/// `Λ^{1/2} D Λ^{1/2}`.
struct RegressionBounder {
    family: Family,
    d: usize,
    /// Rows `a_i` of `A = XΛ^{1/2}`, stored contiguously.
    rows: Vec<f64>,
    row_norm_sq: Vec<f64>,
    response: Vec<f64>,
    sqrt_lambda: Matrix,
    prior_mean: Vector,
    prior_prec: Vector,
    prior_abs: Matrix,
    prior_trace: f64,
}

impl RegressionBounder {
    fn new(model: &RegressionModel, sqrt_lambda: &Matrix) -> Result<Self> {
        check_dim(model.dim(), sqrt_lambda.nrows())?;
        let whitened = &model.data.design * sqrt_lambda;
        let rows: Vec<f64> = whitened.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        let row_norm_sq = whitened.row_iter().map(|r| r.norm_squared()).collect();
        let prior_prec = model.data.prior_var.map(|v| 1.0 / v);
        let prior = symmetrize(&(sqrt_lambda * Matrix::from_diagonal(&prior_prec) * sqrt_lambda));
        Ok(Self {
            family: model.family,
            d: model.dim(),
            rows,
            row_norm_sq,
            response: model.data.response.iter().copied().collect(),
            sqrt_lambda: sqrt_lambda.clone(),
            prior_mean: model.data.prior_mean.clone(),
            prior_prec,
            prior_trace: prior.trace(),
            prior_abs: prior.abs(),
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    /// Returns (|weight| bound, weight lower bound, weight upper bound) for
    /// observation `i` given the range of its linear predictor.
    fn weight_range(&self, i: usize, center: f64, f_min: f64, f_max: f64) -> (f64, f64, f64) {
        match self.family {
            Family::Logistic => {
                let g = g_max_from_range(center, f_min, f_max, 1.0);
                (g, -g, 0.0)
            }
            Family::NegBin { r } => {
                let y = self.response[i];
                let g = (y + r) * r * g_max_from_range(center, f_min, f_max, r);
                (g, -g, 0.0)
            }
            Family::RobustT { nu, sigma } => {
                let b = nu * sigma * sigma;
                let y = self.response[i];
                let (r_lo, r_hi) = (y - f_max, y - f_min);
                let e_lo = if r_lo <= 0.0 && r_hi >= 0.0 { 0.0 } else { (r_lo * r_lo).min(r_hi * r_hi) };
                let e_hi = (r_lo * r_lo).max(r_hi * r_hi);
                let k = |e: f64| (e - b) / ((e + b) * (e + b));
                let (k_lo_end, k_hi_end) = (k(e_lo), k(e_hi));
                let k_min = k_lo_end.min(k_hi_end);
                let k_max = if e_lo <= 3.0 * b && 3.0 * b <= e_hi { k(3.0 * b) } else { k_lo_end.max(k_hi_end) };
                let c = nu + 1.0;
                (c * k_min.abs().max(k_max.abs()), c * k_min, c * k_max)
            }
        }
    }
}

impl HessianBounder for RegressionBounder {
    fn bound(&self, lo: &[f64], hi: &[f64]) -> HessianBound {
        let d = self.d;
        let mut mat = self.prior_abs.clone();
        let mut trace_lo = -self.prior_trace;
        let mut trace_hi = -self.prior_trace;
        let half: Vec<f64> = (0..d).map(|k| 0.5 * (hi[k] - lo[k])).collect();
        let mid: Vec<f64> = (0..d).map(|k| 0.5 * (hi[k] + lo[k])).collect();
        // Row-major accumulator for Σ_i w_i |a_i||a_i|ᵀ.
        let mut acc = vec![0.0; d * d];
        for i in 0..self.row_norm_sq.len() {
            let a = self.row(i);
            let (mut center, mut spread) = (0.0, 0.0);
            for k in 0..d {
                center += a[k] * mid[k];
                spread += a[k].abs() * half[k];
            }
            let (w_abs, w_lo, w_hi) = self.weight_range(i, center, center - spread, center + spread);
            trace_lo += w_lo * self.row_norm_sq[i];
            trace_hi += w_hi * self.row_norm_sq[i];
            if w_abs > 0.0 {
                for k in 0..d {
                    let ak = w_abs * a[k].abs();
                    for l in 0..d {
                        acc[k * d + l] += ak * a[l].abs();
                    }
                }
            }
        }
        for k in 0..d {
            for l in 0..d {
                mat[(k, l)] += acc[k * d + l];
            }
        }
        // `mat` is symmetric and entry-wise non-negative: its spectral norm is
        // its largest eigenvalue.
        let norm = crate::linalg::operator_norm(&mat).unwrap_or(f64::INFINITY);
        HessianBound { norm, trace_lo, trace_hi }
    }

    fn whitened_terms(&self, z: &Vector) -> Option<(Vector, f64)> {
        let d = self.d;
        let x = &self.sqrt_lambda * z;
        let prior = Vector::from_fn(d, |j, _| -(x[j] - self.prior_mean[j]) * self.prior_prec[j]);
        let mut v = &self.sqrt_lambda * prior;
        let mut trace = -self.prior_trace;
        for i in 0..self.row_norm_sq.len() {
            let a = self.row(i);
            let eta: f64 = a.iter().zip(z.iter()).map(|(p, q)| p * q).sum();
            let (d1, d2) = obs_derivatives(self.family, eta, self.response[i]);
            for k in 0..d {
                v[k] += d1 * a[k];
            }
            trace += d2 * self.row_norm_sq[i];
        }
        Some((v, trace))
    }
}

// ---------------------------------------------------------------------------
// Factor: a model together with its preconditioner
// ---------------------------------------------------------------------------

/// A model paired with its preconditioner `Λ_c` and mean hint `a_c`.
#[derive(Clone)]
pub struct Factor {
    pub model: Arc<dyn SubPosteriorModel>,
    pub precond: Arc<Preconditioner>,
    /// `Λ^{1/2}`, shared with the layers built for this factor.
    pub lambda_sqrt: Arc<Matrix>,
    pub mean_hint: Vector,
    bounder: Arc<dyn HessianBounder>,
    phi_floor: Option<f64>,
}

impl Debug for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factor")
            .field("model", &self.model)
            .field("lambda", &self.precond.lambda)
            .field("mean_hint", &self.mean_hint)
            .finish()
    }
}

impl Factor {
    /// Pairs `model` with preconditioner `lambda` and mean hint.
    pub fn new(model: Arc<dyn SubPosteriorModel>, lambda: Matrix, mean_hint: Vector) -> Result<Self> {
        check_dim(model.dim(), lambda.nrows())?;
        check_dim(model.dim(), mean_hint.len())?;
        let precond = Arc::new(Preconditioner::new(lambda)?);
        let bounder = model.hessian_bounder(&precond.sqrt)?;
        // For Gaussian factors the trace term is constant and the quadratic
        // term is non-negative, so φ ≥ ½Tr(ΛH) everywhere.
        let phi_floor = model.gaussian_params().map(|(_, cov)| {
            let prec = spd_inverse(&cov).expect("validated covariance");
            -0.5 * (&precond.lambda * prec).trace()
        });
        let lambda_sqrt = Arc::new(precond.sqrt.clone());
        Ok(Self { model, precond, lambda_sqrt, mean_hint, bounder, phi_floor })
    }

    /// Uses the weighted sample mean and covariance of `samples` as `a_c`
    /// and `Λ_c`.
    pub fn from_samples(model: Arc<dyn SubPosteriorModel>, samples: &[Vector], weights: &[f64]) -> Result<Self> {
        let (mean, cov) = weighted_mean_cov(samples, weights)?;
        Self::new(model, cov, mean)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// `φ(x) = ½(gᵀΛg + Tr(ΛH))`.
    pub fn phi(&self, x: &Vector) -> f64 {
        if let Some((v, tr)) = self.bounder.whitened_terms(&(&self.precond.inv_sqrt * x)) {
            return 0.5 * (v.norm_squared() + tr);
        }
        let (g, h) = self.model.grad_hess(x);
        let lam = &self.precond.lambda;
        let quad = g.dot(&(lam * &g));
        let tr = lam.component_mul(&h).sum();
        0.5 * (quad + tr)
    }

    /// Global lower bound `Φ_c` of `φ`, when known (Gaussian family only).
    pub fn phi_floor(&self) -> Option<f64> {
        self.phi_floor
    }

    /// Bounds on `φ` over the image of the whitened box `[lo, hi]`.
    ///
    /// The anchor is the image of the box midpoint. With `P` a bound on the
    /// whitened Hessian norm over the box and `r` the box half-diagonal,
    /// `φ ≤ ½((‖Λ^{1/2}∇log f(x̂)‖ + rP)² + tr_hi)` and `φ ≥ ½ tr_lo`, where
    /// the trace range defaults to `[-dP, dP]`.
    pub fn phi_bounds(&self, lo: &[f64], hi: &[f64]) -> Result<PhiBounds> {
        let d = self.dim();
        check_dim(d, lo.len())?;
        check_dim(d, hi.len())?;
        if lo.iter().zip(hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h)) {
            return Err(FusionError::UnboundedRegion);
        }
        let mid = Vector::from_fn(d, |k, _| 0.5 * (lo[k] + hi[k]));
        let radius = (0..d).map(|k| (0.5 * (hi[k] - lo[k])).powi(2)).sum::<f64>().sqrt();
        let grad_norm = match self.bounder.whitened_terms(&mid) {
            Some((v, _)) => v.norm(),
            None => (&self.precond.sqrt * self.model.gradient(&(&self.precond.sqrt * &mid))).norm(),
        };
        let hb = self.bounder.bound(lo, hi);
        let lower = 0.5 * hb.trace_lo;
        let upper = 0.5 * ((grad_norm + radius * hb.norm).powi(2) + hb.trace_hi);
        if !(lower.is_finite() && upper.is_finite()) {
            return Err(FusionError::NonFinite("phi bounds"));
        }
        Ok(PhiBounds { lower, upper })
    }
}
