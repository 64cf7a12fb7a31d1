//! Pluggable transition and measurement models.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::belief::{ContextVector, Observation, StateVector};
use crate::error::Result;
use crate::linalg::{sample_with_factor, Gaussian};
use crate::scalar::Scalar;

/// State transition used as the proposal during the prior update.
pub trait TransitionModel<S: Scalar>: Send + Sync {
    fn sample(
        &self,
        state: &StateVector<S>,
        context: &ContextVector<S>,
        rng: &mut dyn RngCore,
    ) -> StateVector<S>;

    /// Transition density, when available. Only needed by non-prior proposals.
    fn density(
        &self,
        _next: &StateVector<S>,
        _state: &StateVector<S>,
        _context: &ContextVector<S>,
    ) -> Option<S> {
        None
    }
}

/// Observation likelihood. Must be finite and bounded above.
pub trait MeasurementModel<S: Scalar>: Send + Sync {
    fn likelihood(&self, observation: &Observation<S>, state: &StateVector<S>) -> S;
    fn predicted_observation(&self, state: &StateVector<S>) -> Observation<S>;
}

/// Lookup of the transition model driving each mixture component.
pub trait TransitionModels<S: Scalar> {
    fn model_for(&self, component_id: usize) -> Option<&dyn TransitionModel<S>>;
}

impl<S: Scalar> TransitionModels<S> for HashMap<usize, Box<dyn TransitionModel<S> + '_>> {
    fn model_for(&self, component_id: usize) -> Option<&dyn TransitionModel<S>> {
        self.get(&component_id).map(|m| m.as_ref() as &dyn TransitionModel<S>)
    }
}

impl<S: Scalar> TransitionModels<S> for BTreeMap<usize, Box<dyn TransitionModel<S> + '_>> {
    fn model_for(&self, component_id: usize) -> Option<&dyn TransitionModel<S>> {
        self.get(&component_id).map(|m| m.as_ref() as &dyn TransitionModel<S>)
    }
}

/// The same transition model for every component.
pub struct Shared<'a, S: Scalar>(pub &'a dyn TransitionModel<S>);

impl<S: Scalar> TransitionModels<S> for Shared<'_, S> {
    fn model_for(&self, _component_id: usize) -> Option<&dyn TransitionModel<S>> {
        Some(self.0)
    }
}

/// Transition from a closure; handy for scripted dynamics.
pub struct FnTransition<F>(pub F);

impl<S, F> TransitionModel<S> for FnTransition<F>
where
    S: Scalar,
    F: Fn(&StateVector<S>, &ContextVector<S>, &mut dyn RngCore) -> StateVector<S> + Send + Sync,
{
    fn sample(
        &self,
        state: &StateVector<S>,
        context: &ContextVector<S>,
        rng: &mut dyn RngCore,
    ) -> StateVector<S> {
        (self.0)(state, context, rng)
    }
}

/// `x' = F x + v`, `v ~ N(0, Q)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianTransition<S: Scalar> {
    pub matrix: DMatrix<S>,
    noise_factor: DMatrix<S>,
    noise: Gaussian<S>,
}

impl<S: Scalar> LinearGaussianTransition<S> {
    pub fn new(matrix: DMatrix<S>, process_noise: DMatrix<S>) -> Result<Self> {
        let noise = Gaussian::new(DVector::zeros(matrix.nrows()), &process_noise, S::lit(1e-12))?;
        Ok(Self {
            noise_factor: noise.factor(),
            matrix,
            noise,
        })
    }
}

impl<S: Scalar> TransitionModel<S> for LinearGaussianTransition<S> {
    fn sample(
        &self,
        state: &StateVector<S>,
        _context: &ContextVector<S>,
        rng: &mut dyn RngCore,
    ) -> StateVector<S> {
        let mean = &self.matrix * state;
        sample_with_factor(&mean, &self.noise_factor, rng)
    }

    fn density(
        &self,
        next: &StateVector<S>,
        state: &StateVector<S>,
        _context: &ContextVector<S>,
    ) -> Option<S> {
        Some(self.noise.pdf(&(next - &self.matrix * state)))
    }
}

/// `z = H x + w`, `w ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianMeasurement<S: Scalar> {
    pub matrix: DMatrix<S>,
    noise: Gaussian<S>,
}

impl<S: Scalar> LinearGaussianMeasurement<S> {
    pub fn new(matrix: DMatrix<S>, noise_covariance: DMatrix<S>) -> Result<Self> {
        let noise = Gaussian::new(DVector::zeros(matrix.nrows()), &noise_covariance, S::lit(1e-12))?;
        Ok(Self { matrix, noise })
    }

    /// Observes the listed state coordinates directly.
    pub fn selecting(state_dim: usize, dims: &[usize], noise_covariance: DMatrix<S>) -> Result<Self> {
        let mut h = DMatrix::zeros(dims.len(), state_dim);
        for (row, &d) in dims.iter().enumerate() {
            h[(row, d)] = S::one();
        }
        Self::new(h, noise_covariance)
    }
}

impl<S: Scalar> MeasurementModel<S> for LinearGaussianMeasurement<S> {
    fn likelihood(&self, observation: &Observation<S>, state: &StateVector<S>) -> S {
        self.noise.pdf(&(observation - &self.matrix * state))
    }

    fn predicted_observation(&self, state: &StateVector<S>) -> Observation<S> {
        &self.matrix * state
    }
}
