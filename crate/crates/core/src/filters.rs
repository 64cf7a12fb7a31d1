//! Gaussian baseline filters: extended and unscented Kalman filters, plus the
//! differentiable approximation of the synthetic benchmark dynamics.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, symmetrize};
use crate::scalar::Scalar;

const INNOVATION_JITTER: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBeliefState<S: Scalar> {
    pub mean: DVector<S>,
    pub covariance: DMatrix<S>,
}

impl<S: Scalar> GaussianBeliefState<S> {
    pub fn new(mean: DVector<S>, covariance: DMatrix<S>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        Ok(Self { mean, covariance })
    }
}

type VecFn<S> = Arc<dyn Fn(&DVector<S>) -> DVector<S> + Send + Sync>;
type JacFn<S> = Arc<dyn Fn(&DVector<S>) -> DMatrix<S> + Send + Sync>;

/// Additive-noise state space model with Jacobians.
#[derive(Clone)]
pub struct FilterModel<S: Scalar> {
    pub transition: VecFn<S>,
    pub transition_jacobian: JacFn<S>,
    pub observation: VecFn<S>,
    pub observation_jacobian: JacFn<S>,
    pub process_noise: DMatrix<S>,
    pub measurement_noise: DMatrix<S>,
}

impl<S: Scalar> fmt::Debug for FilterModel<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilterModel")
            .field("process_noise", &self.process_noise)
            .field("measurement_noise", &self.measurement_noise)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> FilterModel<S> {
    pub fn linear(
        transition: DMatrix<S>,
        observation: DMatrix<S>,
        process_noise: DMatrix<S>,
        measurement_noise: DMatrix<S>,
    ) -> Self {
        let f = transition.clone();
        let h = observation.clone();
        Self {
            transition: Arc::new(move |x| &f * x),
            transition_jacobian: Arc::new(move |_| transition.clone()),
            observation: Arc::new(move |x| &h * x),
            observation_jacobian: Arc::new(move |_| observation.clone()),
            process_noise,
            measurement_noise,
        }
    }
}

fn update_with_gain<S: Scalar>(
    mean: DVector<S>,
    covariance: DMatrix<S>,
    cross: &DMatrix<S>,
    innovation_cov: &DMatrix<S>,
    innovation: &DVector<S>,
) -> Result<GaussianBeliefState<S>> {
    let chol = cholesky_jittered(&symmetrize(innovation_cov), S::lit(INNOVATION_JITTER))?;
    // K = Pxz S⁻¹, computed as (S⁻¹ Pxzᵀ)ᵀ.
    let gain = chol.solve(&cross.transpose()).transpose();
    let mean = mean + &gain * innovation;
    let covariance = symmetrize(&(covariance - &gain * innovation_cov * gain.transpose()));
    Ok(GaussianBeliefState { mean, covariance })
}

/// EKF predict, then update when an observation is present.
pub fn ekf_step<S: Scalar>(
    state: &GaussianBeliefState<S>,
    observation: Option<&DVector<S>>,
    model: &FilterModel<S>,
) -> Result<GaussianBeliefState<S>> {
    let jac = (model.transition_jacobian)(&state.mean);
    let mean = (model.transition)(&state.mean);
    let covariance = symmetrize(&(&jac * &state.covariance * jac.transpose() + &model.process_noise));
    let Some(z) = observation else {
        return Ok(GaussianBeliefState { mean, covariance });
    };
    let h = (model.observation_jacobian)(&mean);
    if z.len() != h.nrows() {
        return Err(Error::DimensionMismatch {
            expected: h.nrows(),
            found: z.len(),
        });
    }
    let innovation = z - (model.observation)(&mean);
    let innovation_cov = &h * &covariance * h.transpose() + &model.measurement_noise;
    let cross = &covariance * h.transpose();
    update_with_gain(mean, covariance, &cross, &innovation_cov, &innovation)
}

/// Scaled unscented transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

struct SigmaPoints<S: Scalar> {
    points: Vec<DVector<S>>,
    mean_weights: Vec<S>,
    cov_weights: Vec<S>,
}

fn sigma_points<S: Scalar>(
    mean: &DVector<S>,
    covariance: &DMatrix<S>,
    cfg: &SigmaConfig,
) -> Result<SigmaPoints<S>> {
    let n = mean.len();
    let nf = n as f64;
    let lambda = cfg.alpha * cfg.alpha * (nf + cfg.kappa) - nf;
    let scale = S::lit(nf + lambda);
    let chol = cholesky_jittered(&symmetrize(&(covariance * scale)), S::lit(INNOVATION_JITTER))?;
    let root = chol.l();
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(mean.clone());
    for i in 0..n {
        points.push(mean + root.column(i));
    }
    for i in 0..n {
        points.push(mean - root.column(i));
    }
    let w0m = lambda / (nf + lambda);
    let wi = 1.0 / (2.0 * (nf + lambda));
    let w0c = w0m + 1.0 - cfg.alpha * cfg.alpha + cfg.beta;
    let mut mean_weights = vec![S::lit(wi); 2 * n + 1];
    let mut cov_weights = mean_weights.clone();
    mean_weights[0] = S::lit(w0m);
    cov_weights[0] = S::lit(w0c);
    Ok(SigmaPoints {
        points,
        mean_weights,
        cov_weights,
    })
}

/// Weighted mean taken relative to the centre point to limit cancellation
/// when the centre weight is large and negative.
fn weighted_mean<S: Scalar>(ys: &[DVector<S>], weights: &[S]) -> DVector<S> {
    let mut mean = ys[0].clone();
    for (y, &w) in ys.iter().zip(weights).skip(1) {
        mean.axpy(w, &(y - &ys[0]), S::one());
    }
    mean
}

fn weighted_cross<S: Scalar>(
    a: &[DVector<S>],
    a_mean: &DVector<S>,
    b: &[DVector<S>],
    b_mean: &DVector<S>,
    weights: &[S],
) -> DMatrix<S> {
    let mut out = DMatrix::zeros(a_mean.len(), b_mean.len());
    for ((x, y), &w) in a.iter().zip(b).zip(weights) {
        out.ger(w, &(x - a_mean), &(y - b_mean), S::one());
    }
    out
}

/// UKF predict, then update when an observation is present.
pub fn ukf_step<S: Scalar>(
    state: &GaussianBeliefState<S>,
    observation: Option<&DVector<S>>,
    model: &FilterModel<S>,
    cfg: &SigmaConfig,
) -> Result<GaussianBeliefState<S>> {
    let sp = sigma_points(&state.mean, &state.covariance, cfg)?;
    let propagated: Vec<DVector<S>> = sp.points.iter().map(|x| (model.transition)(x)).collect();
    let mean = weighted_mean(&propagated, &sp.mean_weights);
    let covariance = symmetrize(
        &(weighted_cross(&propagated, &mean, &propagated, &mean, &sp.cov_weights)
            + &model.process_noise),
    );
    let Some(z) = observation else {
        return Ok(GaussianBeliefState { mean, covariance });
    };
    let sp = sigma_points(&mean, &covariance, cfg)?;
    let predicted: Vec<DVector<S>> = sp.points.iter().map(|x| (model.observation)(x)).collect();
    let z_mean = weighted_mean(&predicted, &sp.mean_weights);
    if z.len() != z_mean.len() {
        return Err(Error::DimensionMismatch {
            expected: z_mean.len(),
            found: z.len(),
        });
    }
    let innovation_cov =
        weighted_cross(&predicted, &z_mean, &predicted, &z_mean, &sp.cov_weights) + &model.measurement_noise;
    let cross = weighted_cross(&sp.points, &mean, &predicted, &z_mean, &sp.cov_weights);
    let innovation = z - z_mean;
    update_with_gain(mean, covariance, &cross, &innovation_cov, &innovation)
}

/// Second moments of the benchmark noise laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseMoments {
    pub process_variances: [f64; 3],
    pub measurement_variances: [f64; 2],
}

impl Default for NoiseMoments {
    /// `N(0, 0.5)`, `U[-1, 1]`, `U[-0.1, 0.1]` process noise and `N(0, 0.5)`
    /// measurement noise, with `N(0, v)` read as variance `v`.
    fn default() -> Self {
        Self {
            process_variances: [0.5, 1.0 / 3.0, 0.01 / 3.0],
            measurement_variances: [0.5, 0.5],
        }
    }
}

/// Transition matrix of the approximated benchmark dynamics, including the
/// factor 2 on the velocity term of the position update.
pub fn approx_transition_matrix<S: Scalar>(dt: f64) -> DMatrix<S> {
    DMatrix::from_row_slice(
        3,
        3,
        &[
            S::one(),
            S::lit(2.0 * dt),
            S::lit(dt * dt),
            S::zero(),
            S::one(),
            S::lit(dt),
            S::zero(),
            S::zero(),
            S::one(),
        ],
    )
}

/// Linear model `x₁ += 2x₂Δt + x₃Δt²`, `x₂ += x₃Δt`, `x₃` constant, observing
/// `(x₁, x₂)`, with moment-matched Gaussian noise.
pub fn approx_model<S: Scalar>(dt: f64, noise: &NoiseMoments) -> Result<FilterModel<S>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig("dt must be positive".into()));
    }
    let h = DMatrix::from_row_slice(2, 3, &[S::one(), S::zero(), S::zero(), S::zero(), S::one(), S::zero()]);
    let q = DMatrix::from_diagonal(&DVector::from_iterator(3, noise.process_variances.iter().map(|&v| S::lit(v))));
    let r = DMatrix::from_diagonal(&DVector::from_iterator(
        2,
        noise.measurement_variances.iter().map(|&v| S::lit(v)),
    ));
    Ok(FilterModel::linear(approx_transition_matrix(dt), h, q, r))
}
