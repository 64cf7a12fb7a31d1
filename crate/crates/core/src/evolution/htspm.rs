//! Behavior-conditional particle propagation.
//!
//! Particles carry a short state history `[x_k, x_{k−1}, …]`. Each draw picks
//! a behavior from the recognition probabilities, samples a state increment
//! from that behavior's regression model conditioned on the history, and
//! shifts the history forward with `x_{k+1} = x_k + u`.

use nalgebra::DVector;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::cgmr::{cgmr_sample, CgmrModel};
use crate::belief::{systematic_resample, ContextVector, FeasibleRegion, StateVector};
use crate::engine::{propagate_state, ConstraintStrategy, TransitionModel};
use crate::error::{Error, Result};
use crate::recognition::DhmmStack;
use crate::scalar::Scalar;

const PROBABILITY_TOL: f64 = 1e-9;

/// Layout of a history-augmented state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateHistory {
    pub state_dim: usize,
    /// Number of stacked states, newest first.
    pub depth: usize,
    /// Entries of the augmented state fed to the regression model.
    pub input_dims: Vec<usize>,
}

impl StateHistory {
    pub fn new(state_dim: usize, depth: usize, input_dims: Vec<usize>) -> Result<Self> {
        if state_dim == 0 || depth == 0 {
            return Err(Error::InvalidConfig("state_dim and depth must be positive".into()));
        }
        if input_dims.is_empty() || input_dims.iter().any(|&d| d >= state_dim * depth) {
            return Err(Error::InvalidConfig("history input dims out of range".into()));
        }
        Ok(Self {
            state_dim,
            depth,
            input_dims,
        })
    }

    pub fn augmented_dim(&self) -> usize {
        self.state_dim * self.depth
    }

    /// Stacks `states` (newest first); missing older entries repeat the oldest given.
    pub fn augment<S: Scalar>(&self, states: &[&StateVector<S>]) -> StateVector<S> {
        let oldest = states.len().saturating_sub(1);
        DVector::from_iterator(
            self.augmented_dim(),
            (0..self.depth).flat_map(|lag| states[lag.min(oldest)].iter().copied()),
        )
    }

    pub fn current<S: Scalar>(&self, augmented: &StateVector<S>) -> StateVector<S> {
        augmented.rows(0, self.state_dim).into_owned()
    }

    pub fn input<S: Scalar>(&self, augmented: &StateVector<S>) -> DVector<S> {
        DVector::from_iterator(self.input_dims.len(), self.input_dims.iter().map(|&i| augmented[i]))
    }

    /// `x_{k+1} = x_k + u`, then shift the history by one slot.
    pub fn advance<S: Scalar>(&self, augmented: &StateVector<S>, increment: &DVector<S>) -> StateVector<S> {
        let n = self.state_dim;
        let mut next = DVector::zeros(self.augmented_dim());
        next.rows_mut(0, n).copy_from(&(augmented.rows(0, n) + increment));
        if self.depth > 1 {
            next.rows_mut(n, n * (self.depth - 1))
                .copy_from(&augmented.rows(0, n * (self.depth - 1)));
        }
        next
    }

    /// Regression training pairs `(input at k, x_{k+1} − x_k)` from a state sequence.
    pub fn training_pairs<S: Scalar>(&self, states: &[StateVector<S>]) -> (Vec<DVector<S>>, Vec<DVector<S>>) {
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for k in self.depth.saturating_sub(1)..states.len().saturating_sub(1) {
            let window: Vec<&StateVector<S>> = (0..self.depth).map(|lag| &states[k - lag]).collect();
            inputs.push(self.input(&self.augment(&window)));
            outputs.push(&states[k + 1] - &states[k]);
        }
        (inputs, outputs)
    }
}

/// Per-behavior increment models sharing one history layout. A single model
/// ignores the behavior probabilities (the pooled, behavior-unaware variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BehaviorEvolution<S: Scalar> {
    pub models: Vec<CgmrModel<S>>,
    pub history: StateHistory,
    /// Box bounds on the current state; `None` entries are unbounded.
    pub lower: Vec<Option<S>>,
    pub upper: Vec<Option<S>>,
}

impl<S: Scalar> BehaviorEvolution<S> {
    pub fn new(
        models: Vec<CgmrModel<S>>,
        history: StateHistory,
        lower: Vec<Option<S>>,
        upper: Vec<Option<S>>,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidInput("need at least one evolution model".into()));
        }
        for m in &models {
            if m.input_dims().len() != history.input_dims.len() || m.output_dims().len() != history.state_dim {
                return Err(Error::DimensionMismatch {
                    expected: history.input_dims.len() + history.state_dim,
                    found: m.joint().dim(),
                });
            }
        }
        if lower.len() != history.state_dim || upper.len() != history.state_dim {
            return Err(Error::DimensionMismatch {
                expected: history.state_dim,
                found: lower.len().min(upper.len()),
            });
        }
        Ok(Self {
            models,
            history,
            lower,
            upper,
        })
    }

    /// Feasible set over the augmented state: bounds apply to the newest slot.
    pub fn feasible_region(&self) -> FeasibleRegion<S> {
        let n = self.history.augmented_dim();
        let inf = S::lit(f64::INFINITY);
        let mut lo = vec![-inf; n];
        let mut hi = vec![inf; n];
        for i in 0..self.history.state_dim {
            if let Some(v) = self.lower[i] {
                lo[i] = v;
            }
            if let Some(v) = self.upper[i] {
                hi[i] = v;
            }
        }
        FeasibleRegion::new(lo, hi).expect("bounds ordered")
    }

    /// Draws a behavior index from `probabilities`.
    pub fn sample_behavior<R: Rng + ?Sized>(&self, probabilities: &[S], rng: &mut R) -> usize {
        if self.models.len() == 1 {
            return 0;
        }
        systematic_resample(probabilities, 1, rng)[0]
    }

    pub fn sample_with_behavior<R: Rng + ?Sized>(
        &self,
        state: &StateVector<S>,
        behavior: usize,
        rng: &mut R,
    ) -> Result<StateVector<S>> {
        let input = self.history.input(state);
        let increment = cgmr_sample(&self.models[behavior], &input, rng)?;
        Ok(self.history.advance(state, &increment))
    }

    fn check_probabilities(&self, probabilities: &[S]) -> Result<()> {
        if self.models.len() == 1 {
            return Ok(());
        }
        if probabilities.len() != self.models.len() {
            return Err(Error::DimensionMismatch {
                expected: self.models.len(),
                found: probabilities.len(),
            });
        }
        let total = probabilities.iter().fold(S::zero(), |a, &p| a + p);
        if probabilities.iter().any(|&p| p < S::zero()) || (total - S::one()).abs() > S::lit(PROBABILITY_TOL) {
            return Err(Error::InvalidInput("behavior probabilities must sum to 1".into()));
        }
        Ok(())
    }
}

impl<S: Scalar> TransitionModel<S> for BehaviorEvolution<S> {
    /// `context` holds the behavior probabilities.
    fn sample(&self, state: &StateVector<S>, context: &ContextVector<S>, rng: &mut dyn RngCore) -> StateVector<S> {
        let b = self.sample_behavior(context.as_slice(), rng);
        self.sample_with_behavior(state, b, rng)
            .expect("history layout validated against the models")
    }
}

/// Recognizer plus one evolution model per recognized behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HtspmModel<S: Scalar> {
    pub recognizer: DhmmStack<S>,
    pub evolution: BehaviorEvolution<S>,
}

impl<S: Scalar> HtspmModel<S> {
    pub fn new(recognizer: DhmmStack<S>, evolution: BehaviorEvolution<S>) -> Result<Self> {
        if evolution.models.len() != recognizer.n_classes() {
            return Err(Error::LengthMismatch {
                left: evolution.models.len(),
                right: recognizer.n_classes(),
            });
        }
        Ok(Self {
            recognizer,
            evolution,
        })
    }
}

/// Moves every particle one step: behavior drawn per particle, increment
/// drawn from that behavior's model, infeasible draws handled by `strategy`.
/// Returns the new states with their feasibility flags.
#[allow(clippy::too_many_arguments)]
pub fn htspm_propagate<S: Scalar>(
    states: &[StateVector<S>],
    probabilities: &[S],
    model: &HtspmModel<S>,
    region: &FeasibleRegion<S>,
    strategy: ConstraintStrategy,
    max_draws: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<(StateVector<S>, bool)>> {
    model.evolution.check_probabilities(probabilities)?;
    let context = DVector::from_column_slice(probabilities);
    Ok(states
        .iter()
        .map(|x| propagate_state(&model.evolution, x, &context, region, strategy, max_draws, rng))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::Gmm;
    use crate::recognition::{Calibration, DhmmLayer, DhmmStack, GaussianHmm};
    use nalgebra::{dmatrix, DMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> StateHistory {
        StateHistory::new(1, 2, vec![0, 1]).unwrap()
    }

    /// Increment model with output `shift` and variance `var`, independent of the input.
    fn constant_model(shift: f64, var: f64) -> CgmrModel<f64> {
        let joint = Gmm::new(
            vec![1.0],
            vec![DVector::from_vec(vec![0.0, 0.0, shift])],
            vec![DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, var]))],
        )
        .unwrap();
        CgmrModel::new(joint, vec![0, 1], vec![2]).unwrap()
    }

    fn recognizer(classes: usize) -> DhmmStack<f64> {
        let hmm = GaussianHmm::new(vec![1.0], dmatrix![1.0], vec![DVector::zeros(1)], vec![DVector::from_element(1, 1.0)]).unwrap();
        let layer = DhmmLayer::new(vec![hmm; classes], 2).unwrap();
        DhmmStack::new(vec![layer], Calibration::PerSequence, (0..classes).map(|c| c.to_string()).collect()).unwrap()
    }

    fn model(shifts: &[f64], var: f64) -> HtspmModel<f64> {
        let evo = BehaviorEvolution::new(
            shifts.iter().map(|&s| constant_model(s, var)).collect(),
            layout(),
            vec![None],
            vec![None],
        )
        .unwrap();
        HtspmModel::new(recognizer(shifts.len()), evo).unwrap()
    }

    #[test]
    fn history_shift_and_pairs() {
        let h = StateHistory::new(2, 3, vec![1, 3, 5]).unwrap();
        let x = [DVector::from_vec(vec![3.0, 30.0]), DVector::from_vec(vec![2.0, 20.0]), DVector::from_vec(vec![1.0, 10.0])];
        let aug = h.augment(&[&x[0], &x[1], &x[2]]);
        assert_eq!(aug.as_slice(), &[3.0, 30.0, 2.0, 20.0, 1.0, 10.0]);
        assert_eq!(h.input(&aug).as_slice(), &[30.0, 20.0, 10.0]);
        let next = h.advance(&aug, &DVector::from_vec(vec![1.0, -5.0]));
        assert_eq!(next.as_slice(), &[4.0, 25.0, 3.0, 30.0, 2.0, 20.0]);
        let seq = vec![x[2].clone(), x[1].clone(), x[0].clone(), DVector::from_vec(vec![4.0, 25.0])];
        let (inp, out) = h.training_pairs(&seq);
        assert_eq!(inp.len(), 1);
        assert_eq!(inp[0].as_slice(), &[30.0, 20.0, 10.0]);
        assert_eq!(out[0].as_slice(), &[1.0, -5.0]);
        let short = h.augment(&[&x[0]]);
        assert_eq!(short.as_slice(), &[3.0, 30.0, 3.0, 30.0, 3.0, 30.0]);
    }

    #[test]
    fn one_hot_uses_that_behavior() {
        let m = model(&[1.0, 10.0, 100.0], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = vec![DVector::from_vec(vec![0.0, 0.0]); 50];
        let region = FeasibleRegion::unbounded(2);
        let out = htspm_propagate(&states, &[0.0, 1.0, 0.0], &m, &region, ConstraintStrategy::ZeroWeight, 1, &mut rng).unwrap();
        assert!(out.iter().all(|(x, ok)| *ok && x[0] == 10.0 && x[1] == 0.0));
    }

    #[test]
    fn uniform_behavior_counts() {
        let m = model(&[1.0, 2.0, 3.0, 4.0], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let states = vec![DVector::from_vec(vec![0.0, 0.0]); n];
        let region = FeasibleRegion::unbounded(2);
        let out = htspm_propagate(&states, &[0.25; 4], &m, &region, ConstraintStrategy::ZeroWeight, 1, &mut rng).unwrap();
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for b in 1..=4 {
            let count = out.iter().filter(|(x, _)| x[0] == b as f64).count() as f64;
            assert!((count - 2500.0).abs() < 3.0 * sd, "behavior {b}: {count}");
        }
    }

    #[test]
    fn zero_increment_keeps_state() {
        let m = model(&[0.0], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states = vec![DVector::from_vec(vec![4.2, 4.2])];
        let out = htspm_propagate(&states, &[1.0], &m, &FeasibleRegion::unbounded(2), ConstraintStrategy::Rejection, 10, &mut rng).unwrap();
        assert_eq!(out[0].0, states[0]);
    }

    #[test]
    fn rejection_respects_bounds() {
        let evo = BehaviorEvolution::new(vec![constant_model(0.0, 1.0)], layout(), vec![Some(0.0)], vec![None]).unwrap();
        let m = HtspmModel::new(recognizer(1), evo).unwrap();
        let region = m.evolution.feasible_region();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states = vec![DVector::from_vec(vec![0.0, 0.0]); 500];
        let out = htspm_propagate(&states, &[1.0], &m, &region, ConstraintStrategy::Rejection, 100, &mut rng).unwrap();
        assert!(out.iter().all(|(x, ok)| *ok && x[0] >= 0.0));
    }

    #[test]
    fn bad_probabilities_rejected() {
        let m = model(&[1.0, 2.0], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states = vec![DVector::zeros(2)];
        let region = FeasibleRegion::unbounded(2);
        assert!(htspm_propagate(&states, &[0.7, 0.7], &m, &region, ConstraintStrategy::ZeroWeight, 1, &mut rng).is_err());
        assert!(htspm_propagate(&states, &[1.0], &m, &region, ConstraintStrategy::ZeroWeight, 1, &mut rng).is_err());
    }

    #[test]
    fn model_count_must_match_classes() {
        let evo = BehaviorEvolution::new(vec![constant_model(0.0, 1.0)], layout(), vec![None], vec![None]).unwrap();
        assert!(HtspmModel::new(recognizer(2), evo).is_err());
    }
}
