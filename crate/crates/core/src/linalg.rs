//! Dense Gaussian helpers shared by the engine, the fitters and the filters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cholesky factorization; on failure adds `jitter·I` (growing tenfold, up to
/// six attempts) until the factorization succeeds.
pub fn cholesky_jittered<S: Scalar>(m: &DMatrix<S>, jitter: S) -> Result<Cholesky<S, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let mut eps = jitter;
    for _ in 0..6 {
        let shifted = m + DMatrix::identity(n, n) * eps;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
        eps *= S::lit(10.0);
    }
    Err(Error::SingularCovariance)
}

pub fn symmetrize<S: Scalar>(m: &DMatrix<S>) -> DMatrix<S> {
    (m + m.transpose()) * S::lit(0.5)
}

/// Sum of the log-diagonal of a Cholesky factor, i.e. `½ ln |Σ|`.
pub fn half_log_det<S: Scalar>(chol: &Cholesky<S, Dyn>) -> S {
    chol.l_dirty()
        .diagonal()
        .iter()
        .fold(S::zero(), |a, &d| a + d.ln())
}

/// A multivariate normal with a cached factorization.
#[derive(Debug, Clone)]
pub struct Gaussian<S: Scalar> {
    pub mean: DVector<S>,
    chol: Cholesky<S, Dyn>,
    log_norm: S,
}

impl<S: Scalar> Gaussian<S> {
    pub fn new(mean: DVector<S>, covariance: &DMatrix<S>, jitter: S) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        let chol = cholesky_jittered(&symmetrize(covariance), jitter)?;
        let d = S::of_count(mean.len());
        let log_norm = -S::lit(0.5) * d * S::two_pi().ln() - half_log_det(&chol);
        Ok(Self {
            mean,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Squared Mahalanobis distance to the mean.
    pub fn mahalanobis_sq(&self, x: &DVector<S>) -> S {
        let d = x - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .expect("cholesky factor has a nonzero diagonal");
        y.dot(&y)
    }

    pub fn log_pdf(&self, x: &DVector<S>) -> S {
        self.log_norm - S::lit(0.5) * self.mahalanobis_sq(x)
    }

    pub fn pdf(&self, x: &DVector<S>) -> S {
        self.log_pdf(x).exp()
    }

    /// Lower Cholesky factor of the (possibly jittered) covariance.
    pub fn factor(&self) -> DMatrix<S> {
        self.chol.l()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<S> {
        sample_with_factor(&self.mean, &self.chol.l(), rng)
    }
}

/// A square-root factor `L` with `L·Lᵀ = m` for a positive semidefinite `m`.
/// Falls back to an eigendecomposition with negative eigenvalues clamped to
/// zero, so singular (even all-zero) covariances still sample exactly.
pub fn psd_factor<S: Scalar>(m: &DMatrix<S>) -> DMatrix<S> {
    let m = symmetrize(m);
    if let Some(c) = Cholesky::new(m.clone()) {
        return c.l();
    }
    let eig = m.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| if v > S::zero() { v.sqrt() } else { S::zero() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// `mean + L·ε` with `ε ~ N(0, I)`.
pub fn sample_with_factor<S: Scalar, R: Rng + ?Sized>(
    mean: &DVector<S>,
    factor: &DMatrix<S>,
    rng: &mut R,
) -> DVector<S> {
    let eps = DVector::from_fn(mean.len(), |_, _| S::standard_normal(rng));
    mean + factor * eps
}

pub fn euclidean_sq<S: Scalar>(a: &DVector<S>, b: &DVector<S>) -> S {
    a.iter()
        .zip(b.iter())
        .fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn psd_factor_handles_singular_input() {
        let m = dmatrix![1.0_f64, 1.0; 1.0, 1.0];
        let l = psd_factor(&m);
        assert!((&l * l.transpose() - &m).amax() < 1e-12);
        assert_eq!(psd_factor(&DMatrix::<f64>::zeros(2, 2)), DMatrix::zeros(2, 2));
    }

    #[test]
    fn standard_normal_density() {
        let g = Gaussian::new(dvector![0.0_f64], &dmatrix![1.0], 1e-9).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((g.log_pdf(&dvector![0.0]) - expected).abs() < 1e-14);
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let m = dmatrix![1.0_f64, 1.0; 1.0, 1.0];
        assert!(cholesky_jittered(&m, 1e-9).is_ok());
        let g = Gaussian::new(dvector![0.0, 0.0], &m, 1e-9).unwrap();
        assert!(g.log_pdf(&dvector![1.0, 1.0]).is_finite());
    }

    #[test]
    fn bivariate_density_matches_closed_form() {
        let cov = dmatrix![2.0_f64, 0.5; 0.5, 1.0];
        let g = Gaussian::new(dvector![1.0, -1.0], &cov, 1e-12).unwrap();
        let x = dvector![0.5, 0.0];
        let det: f64 = 2.0 * 1.0 - 0.25;
        let inv = dmatrix![1.0, -0.5; -0.5, 2.0] / det;
        let d = &x - dvector![1.0, -1.0];
        let q = (d.transpose() * inv * &d)[(0, 0)];
        let expected = -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * q;
        assert!((g.log_pdf(&x) - expected).abs() < 1e-12);
    }
}
