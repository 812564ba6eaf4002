//! Dense symmetric linear algebra: PSD square roots, pooled precisions,
//! precision-weighted centres and operator norms.
//!
//! Everything here is a pure function of its inputs and is safe to call from
//! any thread.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, FusionError, Result};

/// Dense real matrix.
pub type Matrix = DMatrix<f64>;
/// Dense real column vector.
pub type Vector = DVector<f64>;

/// Relative tolerance below which negative eigenvalues are treated as round-off.
const PSD_CLAMP_TOL: f64 = 1e-10;
/// Relative asymmetry tolerated before a matrix is declared non-symmetric.
const SYMMETRY_TOL: f64 = 1e-12;

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FusionError::NonFinite(what))
    }
}

/// Checks that `m` is square and symmetric to within a relative tolerance.
pub fn check_symmetric(m: &Matrix) -> Result<()> {
    check_dim(m.nrows(), m.ncols())?;
    ensure_finite(m, "symmetric matrix")?;
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale.max(1.0) {
                return Err(FusionError::NotPsd(format!("matrix not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// Averages `m` with its transpose, removing round-off asymmetry.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues clamped at zero when they are
/// negative only by round-off.
fn clamped_eigen(m: &Matrix) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_symmetric(m)?;
    let mut eig = SymmetricEigen::new(symmetrize(m));
    let norm = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -PSD_CLAMP_TOL * norm.max(f64::MIN_POSITIVE) {
                return Err(FusionError::NotPsd(format!("eigenvalue {v:.3e}")));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// Symmetric PSD square root `S` with `S·S = m`.
///
/// Computed from the symmetric eigendecomposition (the Schur form of a
/// symmetric matrix); eigenvalues in `[-1e-10‖m‖, 0)` are clamped to zero.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = clamped_eigen(m)?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    Ok(symmetrize(&(&eig.eigenvectors * Matrix::from_diagonal(&roots) * eig.eigenvectors.transpose())))
}

/// Inverse of the PSD square root. Fails with `NotPsd` for singular input.
pub fn psd_inv_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = clamped_eigen(m)?;
    if eig.eigenvalues.iter().any(|v| *v <= 0.0) {
        return Err(FusionError::NotPsd("singular matrix has no inverse square root".into()));
    }
    let roots = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    Ok(symmetrize(&(&eig.eigenvectors * Matrix::from_diagonal(&roots) * eig.eigenvectors.transpose())))
}

/// Cholesky factorisation of an SPD matrix, `NotPsd` on failure.
pub fn cholesky(m: &Matrix) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    check_symmetric(m)?;
    Cholesky::new(symmetrize(m)).ok_or_else(|| FusionError::NotPsd("Cholesky factorisation failed".into()))
}

/// Inverse of an SPD matrix via Cholesky.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    Ok(symmetrize(&cholesky(m)?.inverse()))
}

/// Pooled precision of a family of preconditioners.
///
/// Returns `(Σ Λ_c⁻¹, (Σ Λ_c⁻¹)⁻¹)`.
pub fn pooled_precision(lambdas: &[Matrix]) -> Result<(Matrix, Matrix)> {
    let first = lambdas.first().ok_or(FusionError::EmptyInput("preconditioner list"))?;
    let d = first.nrows();
    let mut precision = Matrix::zeros(d, d);
    for l in lambdas {
        check_dim(d, l.nrows())?;
        check_dim(d, l.ncols())?;
        precision += spd_inverse(l)?;
    }
    let pooled = spd_inverse(&precision)?;
    Ok((precision, pooled))
}

/// Precision-weighted centre `x̃ = Λ_C Σ Λ_c⁻¹ x^(c)`.
pub fn weighted_center(lambdas: &[Matrix], points: &[Vector]) -> Result<Vector> {
    check_dim(lambdas.len(), points.len())?;
    let op = CenterOperator::new(lambdas)?;
    op.center(points)
}

/// Spectral norm `max ‖Ax‖/‖x‖` of a square matrix.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    ensure_finite(m, "operator_norm")?;
    if m.is_empty() {
        return Ok(0.0);
    }
    if m.is_square() && check_symmetric(m).is_ok() {
        let eig = SymmetricEigen::new(symmetrize(m));
        return Ok(eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
    }
    let sv = m.clone().singular_values();
    Ok(sv.iter().fold(0.0_f64, |a, v| a.max(*v)))
}

/// Precomputed `Λ_C` and `Λ_c⁻¹` for repeated evaluation of `x̃`.
#[derive(Debug, Clone)]
pub struct CenterOperator {
    inverses: Vec<Matrix>,
    pooled: Matrix,
}

impl CenterOperator {
    /// Builds the operator for a family of SPD preconditioners.
    pub fn new(lambdas: &[Matrix]) -> Result<Self> {
        let (_, pooled) = pooled_precision(lambdas)?;
        let inverses = lambdas.iter().map(spd_inverse).collect::<Result<Vec<_>>>()?;
        Ok(Self { inverses, pooled })
    }

    /// Builds the operator from already-known inverses and pooled matrix.
    pub fn from_parts(inverses: Vec<Matrix>, pooled: Matrix) -> Self {
        Self { inverses, pooled }
    }

    /// `Λ_C`.
    pub fn pooled(&self) -> &Matrix {
        &self.pooled
    }

    /// Weighted centre of one configuration of per-factor points.
    pub fn center(&self, points: &[Vector]) -> Result<Vector> {
        check_dim(self.inverses.len(), points.len())?;
        let d = self.pooled.nrows();
        let mut acc = Vector::zeros(d);
        for (inv, p) in self.inverses.iter().zip(points) {
            check_dim(d, p.len())?;
            acc += inv * p;
        }
        Ok(&self.pooled * acc)
    }
}

/// Everything derived from one SPD preconditioner `Λ` that the samplers need.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    /// `Λ`.
    pub lambda: Matrix,
    /// `Λ^{1/2}`.
    pub sqrt: Matrix,
    /// `Λ^{-1/2}`.
    pub inv_sqrt: Matrix,
    /// `Λ⁻¹`.
    pub inv: Matrix,
}

impl Preconditioner {
    /// Validates `lambda` as SPD and precomputes its roots and inverse.
    pub fn new(lambda: Matrix) -> Result<Self> {
        cholesky(&lambda)?;
        let lambda = symmetrize(&lambda);
        Ok(Self {
            sqrt: psd_sqrt(&lambda)?,
            inv_sqrt: psd_inv_sqrt(&lambda)?,
            inv: spd_inverse(&lambda)?,
            lambda,
        })
    }

    /// Identity preconditioner in dimension `d`.
    pub fn identity(d: usize) -> Self {
        let i = Matrix::identity(d, d);
        Self { lambda: i.clone(), sqrt: i.clone(), inv_sqrt: i.clone(), inv: i }
    }

    /// Dimension.
    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    /// Squared Mahalanobis norm `vᵀΛ⁻¹v`.
    pub fn mahalanobis_sq(&self, v: &Vector) -> f64 {
        v.dot(&(&self.inv * v))
    }
}

/// Weighted sample mean and covariance (weights need not be normalised).
///
/// Uses the reliability-weights correction `1 − Σw²` so that equal weights
/// reproduce the unbiased sample covariance.
pub fn weighted_mean_cov(samples: &[Vector], weights: &[f64]) -> Result<(Vector, Matrix)> {
    check_dim(samples.len(), weights.len())?;
    let first = samples.first().ok_or(FusionError::EmptyInput("samples"))?;
    let d = first.len();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(FusionError::AllZeroWeights);
    }
    let mut mean = Vector::zeros(d);
    for (s, w) in samples.iter().zip(weights) {
        check_dim(d, s.len())?;
        mean.axpy(w / total, s, 1.0);
    }
    let mut cov = Matrix::zeros(d, d);
    let mut sum_sq = 0.0;
    for (s, w) in samples.iter().zip(weights) {
        let wn = w / total;
        sum_sq += wn * wn;
        let diff = s - &mean;
        cov.ger(wn, &diff, &diff, 1.0);
    }
    let correction = 1.0 - sum_sq;
    if correction > 0.0 {
        cov /= correction;
    }
    Ok((mean, symmetrize(&cov)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_spd(d: usize, seed: &[f64]) -> Matrix {
        let a = Matrix::from_fn(d, d, |i, j| seed[(i * d + j) % seed.len()] + 0.1 * (i as f64 - j as f64));
        &a * a.transpose() + Matrix::identity(d, d) * 0.5
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i2 = Matrix::identity(2, 2);
        assert!(rel_err(&psd_sqrt(&i2).unwrap(), &i2) < 1e-14);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]));
        let s = psd_sqrt(&d).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-14 && (s[(1, 1)] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(psd_sqrt(&m), Err(FusionError::NotPsd(_))));
    }

    #[test]
    fn sqrt_clamps_roundoff_negative() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1e-13]));
        let s = psd_sqrt(&m).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
    }

    #[test]
    fn pooled_precision_examples() {
        let i = Matrix::identity(2, 2);
        let (p, l) = pooled_precision(&[i.clone(), i.clone()]).unwrap();
        assert!(rel_err(&p, &(&i * 2.0)) < 1e-14);
        assert!(rel_err(&l, &(&i * 0.5)) < 1e-14);
        let one = Matrix::from_element(1, 1, 1.0);
        let three = Matrix::from_element(1, 1, 3.0);
        let (p, l) = pooled_precision(&[one, three]).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        assert!((l[(0, 0)] - 0.75).abs() < 1e-14);
        let lam = random_spd(3, &[0.3, -0.7, 1.1, 0.2]);
        let (p, l) = pooled_precision(std::slice::from_ref(&lam)).unwrap();
        assert!(rel_err(&l, &lam) < 1e-12);
        assert!(rel_err(&p, &spd_inverse(&lam).unwrap()) < 1e-12);
    }

    #[test]
    fn pooled_precision_dimension_mismatch() {
        let r = pooled_precision(&[Matrix::identity(2, 2), Matrix::identity(3, 3)]);
        assert!(matches!(r, Err(FusionError::DimensionMismatch { .. })));
    }

    #[test]
    fn weighted_center_examples() {
        let one = Matrix::from_element(1, 1, 1.0);
        let three = Matrix::from_element(1, 1, 3.0);
        let p = |v: f64| Vector::from_element(1, v);
        let c = weighted_center(&[one.clone(), one.clone()], &[p(0.0), p(4.0)]).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-14);
        let c = weighted_center(&[one, three], &[p(0.0), p(4.0)]).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn operator_norm_examples() {
        assert!((operator_norm(&Matrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-14);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, -5.0]));
        assert!((operator_norm(&d).unwrap() - 5.0).abs() < 1e-14);
        let bad = Matrix::from_element(1, 1, f64::NAN);
        assert!(matches!(operator_norm(&bad), Err(FusionError::NonFinite(_))));
    }

    #[test]
    fn operator_norm_matches_power_iteration() {
        let a = Matrix::from_row_slice(3, 3, &[1.0, 2.0, 0.5, -0.3, 0.7, 1.5, 2.2, -1.0, 0.1]);
        // Power iteration on AᵀA converges to the squared top singular value.
        let ata = a.transpose() * &a;
        let mut v = Vector::from_element(3, 1.0);
        for _ in 0..500 {
            v = &ata * &v;
            v /= v.norm();
        }
        let sigma = (&a * &v).norm();
        assert!((operator_norm(&a).unwrap() - sigma).abs() / sigma < 1e-8);
    }

    #[test]
    fn weighted_mean_cov_equal_weights_is_sample_cov() {
        let s: Vec<Vector> = [1.0, 2.0, 4.0, 7.0].iter().map(|v| Vector::from_element(1, *v)).collect();
        let (m, c) = weighted_mean_cov(&s, &[1.0; 4]).unwrap();
        assert!((m[0] - 3.5).abs() < 1e-14);
        // Unbiased variance of {1,2,4,7} is 7.
        assert!((c[(0, 0)] - 7.0).abs() < 1e-12);
    }

    fn spd_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..=20).prop_flat_map(|d| {
            proptest::collection::vec(-2.0f64..2.0, d * d).prop_map(move |v| {
                let a = Matrix::from_vec(d, d, v);
                &a * a.transpose() + Matrix::identity(d, d) * 1e-3
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sqrt_squares_back(m in spd_strategy()) {
            let s = psd_sqrt(&m).unwrap();
            prop_assert!(rel_err(&(&s * &s), &m) < 1e-10);
        }

        #[test]
        fn pooled_is_dominated_by_each_member(
            a in spd_strategy(),
            scale in 0.1f64..10.0,
        ) {
            let d = a.nrows();
            let b = Matrix::identity(d, d) * scale + &a * 0.5;
            let (_, pooled) = pooled_precision(&[a.clone(), b.clone()]).unwrap();
            for l in [&a, &b] {
                let gap = SymmetricEigen::new(symmetrize(&(l - &pooled))).eigenvalues.min();
                prop_assert!(gap >= -1e-10 * l.norm());
            }
        }

        #[test]
        fn equal_lambda_center_is_mean(
            pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..6),
        ) {
            let lam = Matrix::identity(3, 3) * 2.5;
            let lambdas = vec![lam; pts.len()];
            let points: Vec<Vector> = pts.iter().map(|p| Vector::from_vec(p.clone())).collect();
            let c = weighted_center(&lambdas, &points).unwrap();
            let mean = points.iter().fold(Vector::zeros(3), |a, p| a + p) / points.len() as f64;
            prop_assert!((c - mean).amax() < 1e-12);
        }
    }
}
