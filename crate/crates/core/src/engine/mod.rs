//! The constrained mixture SMC recursion.
//!
//! One call to [`step`] runs, in order: the prior update (proposal sampling
//! with constraint handling), the measurement update with the per-component
//! missing-measurement gate, the component-weight update, adaptive
//! Remove/Add/Merge when enabled, and k-medoids reclustering with the
//! mass-preserving reweighting.

mod adapt;
mod models;
mod recluster;
mod update;

pub use adapt::{adapt_components, component_distance};
pub use models::{
    FnTransition, LinearGaussianMeasurement, LinearGaussianTransition, MeasurementModel, Shared,
    TransitionModel, TransitionModels,
};
pub use recluster::{recluster, KMEDOIDS_MAX_ITERS};
pub use update::{
    assert_measurement_missing, divergence_alert, measurement_update, prior_update,
    propagate_state, update_component_weights,
};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{ContextVector, FeasibleRegion, MixtureBelief, ObservationFrame};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintStrategy {
    /// Draw once; infeasible draws get zero weight.
    ZeroWeight,
    /// Redraw until feasible, up to `max_rejection_draws`.
    Rejection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionMode {
    Tracking,
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixtureUpdateMode {
    Fixed,
    Adaptive,
}

/// How one particle is scored against several simultaneous measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodCombination {
    Sum,
    Max,
}

/// Where the Add rule places a new component.
#[derive(Debug, Clone, PartialEq)]
pub struct SpawnConfig<S: Scalar> {
    /// State coordinates taken from the measurement, in measurement order.
    pub observed_dims: Vec<usize>,
    /// Values for the remaining coordinates.
    pub default_state: DVector<S>,
    /// Diagonal of the spawn covariance.
    pub covariance_diag: DVector<S>,
}

#[derive(Debug, Clone)]
pub struct EngineConfig<S: Scalar> {
    pub strategy: ConstraintStrategy,
    /// Resample a component when its ESS falls below this fraction of its particle count.
    pub ess_threshold_ratio: S,
    pub max_rejection_draws: usize,
    pub pi_threshold: S,
    pub min_assigned_particles: usize,
    pub merge_threshold: S,
    pub miss_distance: S,
    /// Components whose predicted observation leaves this box are removed.
    pub observation_area: FeasibleRegion<S>,
    /// Feasible set of states.
    pub state_region: FeasibleRegion<S>,
    pub particles_per_component: usize,
    pub function_mode: FunctionMode,
    pub mixture_update_mode: MixtureUpdateMode,
    pub likelihood_combination: LikelihoodCombination,
    pub missing_assertion: bool,
    pub ess_alert_threshold: S,
    pub likelihood_alert_threshold: S,
    pub spawn: Option<SpawnConfig<S>>,
}

impl<S: Scalar> EngineConfig<S> {
    pub fn new(state_dim: usize, observation_dim: usize) -> Self {
        Self {
            strategy: ConstraintStrategy::ZeroWeight,
            ess_threshold_ratio: S::lit(0.5),
            max_rejection_draws: 100,
            pi_threshold: S::lit(0.05),
            min_assigned_particles: 5,
            merge_threshold: S::lit(0.05),
            miss_distance: S::lit(5.0),
            observation_area: FeasibleRegion::unbounded(observation_dim),
            state_region: FeasibleRegion::unbounded(state_dim),
            particles_per_component: 100,
            function_mode: FunctionMode::Tracking,
            mixture_update_mode: MixtureUpdateMode::Fixed,
            likelihood_combination: LikelihoodCombination::Sum,
            missing_assertion: true,
            ess_alert_threshold: S::lit(1.5),
            likelihood_alert_threshold: S::lit(1e-30),
            spawn: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.ess_threshold_ratio > S::zero()) || self.ess_threshold_ratio > S::one() {
            return bad("ess_threshold_ratio must lie in (0, 1]");
        }
        if self.max_rejection_draws < 1 {
            return bad("max_rejection_draws must be at least 1");
        }
        if !(self.pi_threshold > S::zero()) {
            return bad("pi_threshold must be positive");
        }
        if !(self.merge_threshold > S::zero() && self.merge_threshold < S::one()) {
            return bad("merge_threshold must lie in (0, 1)");
        }
        if !(self.miss_distance > S::zero()) {
            return bad("miss_distance must be positive");
        }
        if self.particles_per_component < 1 {
            return bad("particles_per_component must be at least 1");
        }
        if self.min_assigned_particles < 1 {
            return bad("min_assigned_particles must be at least 1");
        }
        if let Some(s) = &self.spawn {
            if s.default_state.len() != s.covariance_diag.len() {
                return bad("spawn default_state and covariance_diag differ in length");
            }
            if s.observed_dims.iter().any(|&d| d >= s.default_state.len()) {
                return bad("spawn observed_dims out of range");
            }
            if s.covariance_diag.iter().any(|&v| v < S::zero()) {
                return bad("spawn covariance must be nonnegative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStepStats<S: Scalar> {
    pub id: usize,
    /// ESS after the measurement update, before any resampling.
    pub ess: Option<S>,
    pub max_likelihood: Option<S>,
    pub resampled: bool,
    pub missing: bool,
    pub alert: bool,
}

impl<S: Scalar> ComponentStepStats<S> {
    pub(crate) fn idle(id: usize) -> Self {
        Self {
            id,
            ess: None,
            max_likelihood: None,
            resampled: false,
            missing: false,
            alert: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComponentEvents {
    pub added: Vec<usize>,
    pub removed: Vec<usize>,
    /// `(kept, absorbed)` pairs.
    pub merged: Vec<(usize, usize)>,
    /// Components whose recluster partition came back empty.
    pub dissolved: Vec<usize>,
}

impl ComponentEvents {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty()
            && self.removed.is_empty()
            && self.merged.is_empty()
            && self.dissolved.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport<S: Scalar> {
    pub step: usize,
    pub components: Vec<ComponentStepStats<S>>,
    pub divergence: bool,
    pub events: ComponentEvents,
}

impl<S: Scalar> StepReport<S> {
    pub(crate) fn idle(belief: &MixtureBelief<S>) -> Self {
        Self {
            step: belief.step,
            components: belief
                .components
                .iter()
                .map(|c| ComponentStepStats::idle(c.id))
                .collect(),
            divergence: false,
            events: ComponentEvents::default(),
        }
    }

    pub fn stats(&self, id: usize) -> Option<&ComponentStepStats<S>> {
        self.components.iter().find(|c| c.id == id)
    }

    pub fn all_missing(&self) -> bool {
        self.components.iter().all(|c| c.missing)
    }
}

/// One pass of the tracking/prediction loop.
///
/// `frame` is ignored in prediction mode; in tracking mode `None` behaves like
/// an empty frame.
#[allow(clippy::too_many_arguments)]
pub fn step<S, M, R>(
    belief: &MixtureBelief<S>,
    frame: Option<&ObservationFrame<S>>,
    models: &M,
    context: &ContextVector<S>,
    measurement: &dyn MeasurementModel<S>,
    cfg: &EngineConfig<S>,
    rng: &mut R,
) -> Result<(MixtureBelief<S>, StepReport<S>)>
where
    S: Scalar,
    M: TransitionModels<S> + ?Sized,
    R: Rng + ?Sized,
{
    let predicted = prior_update(belief, models, context, &cfg.state_region, cfg, rng)?;

    let (mut current, mut report) = match cfg.function_mode {
        FunctionMode::Tracking => {
            let empty;
            let frame = match frame {
                Some(f) => f,
                None => {
                    empty = ObservationFrame::empty(belief.step + 1);
                    &empty
                }
            };
            measurement_update(&predicted, frame, measurement, cfg, rng)?
        }
        FunctionMode::Prediction => {
            let mut b = predicted;
            let mut report = StepReport::idle(&b);
            update::mask_unmeasured(&mut b, &mut report);
            (b, report)
        }
    };

    if cfg.mixture_update_mode == MixtureUpdateMode::Adaptive {
        let frame = match cfg.function_mode {
            FunctionMode::Tracking => frame,
            FunctionMode::Prediction => None,
        };
        let (adapted, events) = adapt_components(&current, frame, measurement, cfg, rng)?;
        current = adapted;
        report.events = events;
    }

    let (mut reclustered, dissolved) = recluster(&current)?;
    report.events.dissolved = dissolved;
    reclustered.step = belief.step + 1;
    report.step = reclustered.step;
    report.divergence = report.components.iter().any(|c| c.alert);
    Ok((reclustered, report))
}

/// Repeated prediction-mode steps. Element `t` is the `(t+1)`-step-ahead
/// predictive mixture; the input belief is left untouched.
pub fn predict_rollout<S, M, R>(
    belief: &MixtureBelief<S>,
    models: &M,
    context: &ContextVector<S>,
    measurement: &dyn MeasurementModel<S>,
    horizon: usize,
    cfg: &EngineConfig<S>,
    rng: &mut R,
) -> Result<Vec<MixtureBelief<S>>>
where
    S: Scalar,
    M: TransitionModels<S> + ?Sized,
    R: Rng + ?Sized,
{
    if horizon == 0 {
        return Err(Error::InvalidInput("rollout horizon must be at least 1".into()));
    }
    let mut cfg = cfg.clone();
    cfg.function_mode = FunctionMode::Prediction;
    let mut out = Vec::with_capacity(horizon);
    let mut current = belief.clone();
    for _ in 0..horizon {
        let (next, _) = step(&current, None, models, context, measurement, &cfg, rng)?;
        out.push(next.clone());
        current = next;
    }
    Ok(out)
}
