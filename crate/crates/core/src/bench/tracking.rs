//! Single-trajectory trackers used by the experiments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::{X2_MIN, X3_INIT_VAR, X3_LIMIT};
use crate::belief::{belief_summary, FeasibleRegion, MixtureBelief, MixtureComponent, ObservationFrame, StateVector};
use crate::engine::{
    self, ConstraintStrategy, EngineConfig, LinearGaussianMeasurement, LinearGaussianTransition, Shared,
    TransitionModel,
};
use crate::error::{Error, Result};
use crate::evolution::BehaviorEvolution;
use crate::linalg::{psd_factor, sample_with_factor};
use crate::filters::{ekf_step, approx_model, ukf_step, GaussianBeliefState, NoiseMoments, SigmaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Recognizer-weighted behavior-conditional regression.
    Htspm,
    /// One pooled regression, no recognizer.
    Ggmr,
    /// Particle filter on the linear approximated dynamics.
    Ssm,
    Ekf,
    Ukf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Htspm => "HTSPM",
            ModelKind::Ggmr => "GGMR",
            ModelKind::Ssm => "SSM",
            ModelKind::Ekf => "EKF",
            ModelKind::Ukf => "UKF",
        }
    }

    pub fn is_particle_filter(self) -> bool {
        matches!(self, ModelKind::Htspm | ModelKind::Ggmr | ModelKind::Ssm)
    }
}

/// What to do when the engine raises a divergence alert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergencePolicy {
    /// Abort the run with [`Error::Divergence`].
    Stop,
    /// Re-seed the particles around the current measurement and go on.
    Reinitialize,
    Continue,
}

/// Particle filter settings shared by every particle tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerSettings {
    pub particles: usize,
    pub strategy: ConstraintStrategy,
    pub ess_threshold_ratio: f64,
    pub max_rejection_draws: usize,
    pub on_divergence: DivergencePolicy,
    /// Distance beyond which a measurement is treated as not belonging to the
    /// target. `None` accepts every measurement; only empty frames count as missed.
    pub miss_distance: Option<f64>,
    pub noise: NoiseMoments,
    pub dt: f64,
}

impl Default for TrackerSettings {
    fn default() -> Self {
        Self {
            particles: 100,
            strategy: ConstraintStrategy::ZeroWeight,
            ess_threshold_ratio: 0.5,
            max_rejection_draws: 100,
            on_divergence: DivergencePolicy::Reinitialize,
            miss_distance: None,
            noise: NoiseMoments::default(),
            dt: 0.1,
        }
    }
}

/// Tracking output for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    /// Estimated `(x₁, x₂, x₃)` per step, step 0 being the initialization.
    pub estimates: Vec<DVector<f64>>,
    /// Behavior probabilities used as context for the transition into each step.
    pub context: Vec<Option<DVector<f64>>>,
    /// Steps at which a divergence alert was raised.
    pub alerts: Vec<usize>,
    /// Posterior over `(x₁, x₂, x₃)` at every step.
    pub beliefs: Vec<StepBelief>,
}

/// The tracker's posterior at one step, restricted to the current state.
#[derive(Debug, Clone, PartialEq)]
pub enum StepBelief {
    /// `(weight, state)` pairs with weights summing to one.
    Particles(Vec<(f64, [f64; 3])>),
    Gaussian {
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    },
}

impl StepBelief {
    fn of_mixture(belief: &MixtureBelief<f64>) -> Self {
        StepBelief::Particles(
            belief
                .components
                .iter()
                .flat_map(|c| {
                    c.particles
                        .iter()
                        .map(move |p| (c.pi * p.weight, [p.state[0], p.state[1], p.state[2]]))
                })
                .collect(),
        )
    }

    /// Expected per-dimension absolute error of a draw from this belief.
    /// Gaussian beliefs are represented by `samples` draws, so they are
    /// scored the same way as a particle set of that size.
    pub fn absolute_error<R: Rng>(&self, truth: &DVector<f64>, samples: usize, rng: &mut R) -> Result<DVector<f64>> {
        let mut err = DVector::zeros(3);
        match self {
            StepBelief::Particles(ps) => {
                for (w, x) in ps {
                    for d in 0..3 {
                        err[d] += w * (x[d] - truth[d]).abs();
                    }
                }
            }
            StepBelief::Gaussian { mean, covariance } => {
                let factor = psd_factor(covariance);
                let n = samples.max(1);
                for _ in 0..n {
                    let x = sample_with_factor(mean, &factor, rng);
                    err += (x - truth).abs();
                }
                err /= n as f64;
            }
        }
        Ok(err)
    }
}

/// Per-step posterior absolute error against `truth`; Gaussian beliefs are
/// sampled with `samples` draws per step.
pub fn belief_errors(
    output: &TrackOutput,
    truth: &[DVector<f64>],
    samples: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if output.beliefs.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: output.beliefs.len(),
            right: truth.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    output
        .beliefs
        .iter()
        .zip(truth)
        .map(|(b, t)| b.absolute_error(t, samples, &mut rng))
        .collect()
}

/// Transition, feasible region and history layout of one particle tracker.
pub enum ParticleDynamics<'a> {
    /// History-augmented regression; probabilities feed the context.
    Evolution(&'a BehaviorEvolution<f64>),
    /// The approximated linear dynamics with box constraints.
    Linear(LinearGaussianTransition<f64>),
}

impl ParticleDynamics<'_> {
    pub fn linear(settings: &TrackerSettings) -> Result<Self> {
        let m = approx_model::<f64>(settings.dt, &settings.noise)?;
        Ok(ParticleDynamics::Linear(LinearGaussianTransition::new(
            crate::filters::approx_transition_matrix(settings.dt),
            m.process_noise,
        )?))
    }

    fn depth(&self) -> usize {
        match self {
            ParticleDynamics::Evolution(e) => e.history.depth,
            ParticleDynamics::Linear(_) => 1,
        }
    }

    fn region(&self) -> FeasibleRegion<f64> {
        match self {
            ParticleDynamics::Evolution(e) => e.feasible_region(),
            ParticleDynamics::Linear(_) => FeasibleRegion::new(
                vec![f64::NEG_INFINITY, X2_MIN, -X3_LIMIT],
                vec![f64::INFINITY, f64::INFINITY, X3_LIMIT],
            )
            .expect("ordered bounds"),
        }
    }

    fn transition(&self) -> &dyn TransitionModel<f64> {
        match self {
            ParticleDynamics::Evolution(e) => *e,
            ParticleDynamics::Linear(t) => t,
        }
    }
}

pub(crate) fn measurement(dim: usize, noise: &NoiseMoments) -> Result<LinearGaussianMeasurement<f64>> {
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(&noise.measurement_variances));
    LinearGaussianMeasurement::selecting(dim, &[0, 1], r)
}

/// Particles around a measurement: `x₁, x₂` from the measurement noise law
/// (x₂ redrawn until nonnegative), `x₃` from its initial law, history slots
/// repeating the current state.
pub(crate) fn seed_particles<R: Rng>(
    z: &DVector<f64>,
    x3_center: f64,
    n: usize,
    depth: usize,
    noise: &NoiseMoments,
    rng: &mut R,
) -> Vec<StateVector<f64>> {
    let s1 = noise.measurement_variances[0].sqrt();
    let s2 = noise.measurement_variances[1].sqrt();
    let s3 = X3_INIT_VAR.sqrt();
    let normal = |rng: &mut R| -> f64 { rng.sample(rand_distr::StandardNormal) };
    (0..n)
        .map(|_| {
            let x1 = z[0] + s1 * normal(rng);
            let mut x2 = z[1] + s2 * normal(rng);
            for _ in 0..100 {
                if x2 >= X2_MIN {
                    break;
                }
                x2 = z[1] + s2 * normal(rng);
            }
            let x2 = x2.max(X2_MIN);
            let x3 = (x3_center + s3 * normal(rng)).clamp(-X3_LIMIT, X3_LIMIT);
            let x = DVector::from_vec(vec![x1, x2, x3]);
            DVector::from_iterator(3 * depth, (0..depth).flat_map(|_| x.iter().copied()))
        })
        .collect()
}

fn single_component(states: Vec<StateVector<f64>>, step: usize) -> Result<MixtureBelief<f64>> {
    let mut b = MixtureBelief::new(step, vec![MixtureComponent::from_states(0, 1.0, states)])?;
    b.step = step;
    Ok(b)
}

pub(crate) fn engine_config(dim: usize, settings: &TrackerSettings, region: FeasibleRegion<f64>) -> EngineConfig<f64> {
    let mut cfg = EngineConfig::new(dim, 2);
    cfg.strategy = settings.strategy;
    cfg.ess_threshold_ratio = settings.ess_threshold_ratio;
    cfg.max_rejection_draws = settings.max_rejection_draws;
    cfg.particles_per_component = settings.particles;
    cfg.state_region = region;
    match settings.miss_distance {
        Some(d) => cfg.miss_distance = d,
        None => cfg.missing_assertion = false,
    }
    cfg
}

fn uniform(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}

/// Single-target constrained particle tracking over `observations`
/// (`None` = occluded). `probabilities[t]` is what the recognizer knows
/// after frame `t`; the transition into step `k` uses `probabilities[k−1]`,
/// or a uniform vector before the recognizer's first output.
pub fn track_particles(
    dynamics: &ParticleDynamics<'_>,
    observations: &[Option<DVector<f64>>],
    probabilities: Option<&[Option<DVector<f64>>]>,
    n_classes: usize,
    settings: &TrackerSettings,
    seed: u64,
) -> Result<TrackOutput> {
    track_particles_with(dynamics, observations, probabilities, n_classes, settings, seed, &mut |_, _, _| Ok(()))
}

/// [`track_particles`], calling `inspect(k, belief, context)` with the full
/// posterior after every step `k ≥ 1`. `context` is the vector the next
/// transition would use.
#[allow(clippy::too_many_arguments)]
pub fn track_particles_with(
    dynamics: &ParticleDynamics<'_>,
    observations: &[Option<DVector<f64>>],
    probabilities: Option<&[Option<DVector<f64>>]>,
    n_classes: usize,
    settings: &TrackerSettings,
    seed: u64,
    inspect: &mut dyn FnMut(usize, &MixtureBelief<f64>, &DVector<f64>) -> Result<()>,
) -> Result<TrackOutput> {
    let Some(Some(z0)) = observations.first() else {
        return Err(Error::InvalidInput("tracking needs a measurement at step 0".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = dynamics.depth();
    let dim = 3 * depth;
    let meas = measurement(dim, &settings.noise)?;
    let cfg = engine_config(dim, settings, dynamics.region());
    cfg.validate()?;
    let models = Shared(dynamics.transition());

    let mut belief = single_component(seed_particles(z0, 0.0, settings.particles, depth, &settings.noise, &mut rng), 0)?;
    let mut estimates = vec![current_estimate(&belief)?];
    let mut beliefs = vec![StepBelief::of_mixture(&belief)];
    let mut context_trace = vec![None];
    let mut alerts = Vec::new();
    for k in 1..observations.len() {
        let context = context_at(probabilities, k - 1, n_classes);
        let frame = match &observations[k] {
            Some(z) => ObservationFrame::new(k, vec![z.clone()]),
            None => ObservationFrame::empty(k),
        };
        let (next, report) = engine::step(&belief, Some(&frame), &models, &context, &meas, &cfg, &mut rng)
            .map_err(|e| e.context(format!("step {k}")))?;
        belief = next;
        if report.divergence {
            alerts.push(k);
            match settings.on_divergence {
                DivergencePolicy::Stop => return Err(Error::Divergence { step: k }),
                DivergencePolicy::Continue => {}
                DivergencePolicy::Reinitialize => {
                    if let Some(z) = &observations[k] {
                        let x3 = current_estimate(&belief)?[2];
                        belief = single_component(
                            seed_particles(z, x3, settings.particles, depth, &settings.noise, &mut rng),
                            k,
                        )?;
                    }
                }
            }
        }
        inspect(k, &belief, &context_at(probabilities, k, n_classes))?;
        estimates.push(current_estimate(&belief)?);
        beliefs.push(StepBelief::of_mixture(&belief));
        context_trace.push(probabilities.map(|_| context));
    }
    Ok(TrackOutput {
        estimates,
        context: context_trace,
        alerts,
        beliefs,
    })
}

fn context_at(probabilities: Option<&[Option<DVector<f64>>]>, t: usize, n_classes: usize) -> DVector<f64> {
    match probabilities.and_then(|p| p.get(t)).cloned().flatten() {
        Some(p) => p,
        None => uniform(n_classes.max(1)),
    }
}

/// Mean `(x₁, x₂)` of the `1..=horizon`-step-ahead predictive beliefs.
pub fn predict_particles(
    dynamics: &ParticleDynamics<'_>,
    belief: &MixtureBelief<f64>,
    context: &DVector<f64>,
    horizon: usize,
    settings: &TrackerSettings,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    let dim = 3 * dynamics.depth();
    let meas = measurement(dim, &settings.noise)?;
    let cfg = engine_config(dim, settings, dynamics.region());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    engine::predict_rollout(belief, &Shared(dynamics.transition()), context, &meas, horizon, &cfg, &mut rng)?
        .iter()
        .map(|b| current_estimate(b).map(|x| [x[0], x[1]]))
        .collect()
}

/// Mean `(x₁, x₂)` of a Kalman-type belief pushed `1..=horizon` steps ahead
/// with no measurements.
pub fn predict_gaussian(
    kind: ModelKind,
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
    horizon: usize,
    settings: &TrackerSettings,
) -> Result<Vec<[f64; 2]>> {
    let model = approx_model::<f64>(settings.dt, &settings.noise)?;
    let sigma = SigmaConfig::default();
    let mut state = GaussianBeliefState::new(mean.clone(), covariance.clone())?;
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        state = match kind {
            ModelKind::Ekf => ekf_step(&state, None, &model),
            ModelKind::Ukf => ukf_step(&state, None, &model, &sigma),
            other => return Err(Error::InvalidInput(format!("{} is not a Gaussian filter", other.name()))),
        }?;
        out.push([state.mean[0], state.mean[1]]);
    }
    Ok(out)
}

fn current_estimate(belief: &MixtureBelief<f64>) -> Result<DVector<f64>> {
    Ok(belief_summary(belief)?.overall_mean.rows(0, 3).into_owned())
}

/// Kalman-type baseline on the approximated linear dynamics, started at
/// `(z₁, z₂, 0)` with the measurement and initial-`x₃` variances.
pub fn track_gaussian(kind: ModelKind, observations: &[Option<DVector<f64>>], settings: &TrackerSettings) -> Result<TrackOutput> {
    let Some(Some(z0)) = observations.first() else {
        return Err(Error::InvalidInput("tracking needs a measurement at step 0".into()));
    };
    let model = approx_model::<f64>(settings.dt, &settings.noise)?;
    let mv = settings.noise.measurement_variances;
    let mut state = GaussianBeliefState::new(
        DVector::from_vec(vec![z0[0], z0[1], 0.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![mv[0], mv[1], X3_INIT_VAR])),
    )?;
    let sigma = SigmaConfig::default();
    let gaussian = |s: &GaussianBeliefState<f64>| StepBelief::Gaussian {
        mean: s.mean.clone(),
        covariance: s.covariance.clone(),
    };
    let mut estimates = vec![state.mean.clone()];
    let mut beliefs = vec![gaussian(&state)];
    for (k, z) in observations.iter().enumerate().skip(1) {
        state = match kind {
            ModelKind::Ekf => ekf_step(&state, z.as_ref(), &model),
            ModelKind::Ukf => ukf_step(&state, z.as_ref(), &model, &sigma),
            other => return Err(Error::InvalidInput(format!("{} is not a Gaussian filter", other.name()))),
        }
        .map_err(|e| e.context(format!("step {k}")))?;
        estimates.push(state.mean.clone());
        beliefs.push(gaussian(&state));
    }
    Ok(TrackOutput {
        estimates,
        context: vec![None; observations.len()],
        alerts: Vec::new(),
        beliefs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::metrics::compute_mae;
    use crate::bench::synthetic::{generate_trajectory, BehaviorSpec, GenerateOptions};

    fn observed(t: &crate::bench::synthetic::LabeledTrajectory) -> Vec<Option<DVector<f64>>> {
        t.observations.iter().cloned().map(Some).collect()
    }

    #[test]
    fn ssm_particles_track_position_within_measurement_scale() {
        let spec = BehaviorSpec::numerical();
        let t = generate_trajectory(&spec, "I", 4, 120, &GenerateOptions::default()).unwrap();
        let settings = TrackerSettings::default();
        let dyns = ParticleDynamics::linear(&settings).unwrap();
        let out = track_particles(&dyns, &observed(&t), None, 1, &settings, 1).unwrap();
        assert_eq!(out.estimates.len(), 120);
        let mae = compute_mae(&out.estimates[1..], &t.states[1..]).unwrap();
        assert!(mae[0] < 1.5, "x1 mae {}", mae[0]);
        assert!(out.estimates.iter().all(|x| x[1] >= 0.0));
    }

    #[test]
    fn noise_free_target_is_tracked_closely() {
        let spec = BehaviorSpec::numerical();
        let opts = GenerateOptions {
            noise_free: true,
            initial_state: Some([0.0, 10.0, 0.0]),
            start_step: 0,
        };
        let t = generate_trajectory(&spec, "II", 0, 60, &opts).unwrap();
        let settings = TrackerSettings {
            noise: NoiseMoments {
                measurement_variances: [1e-3, 1e-3],
                ..NoiseMoments::default()
            },
            ..TrackerSettings::default()
        };
        let out = track_gaussian(ModelKind::Ekf, &observed(&t), &settings).unwrap();
        let mae = compute_mae(&out.estimates[1..], &t.states[1..]).unwrap();
        assert!(mae[0] < 0.5f64.sqrt(), "x1 mae {}", mae[0]);
        let dyns = ParticleDynamics::linear(&settings).unwrap();
        let pf = track_particles(&dyns, &observed(&t), None, 1, &settings, 2).unwrap();
        let mae = compute_mae(&pf.estimates[1..], &t.states[1..]).unwrap();
        assert!(mae[0] < 0.5f64.sqrt(), "x1 mae {}", mae[0]);
    }

    #[test]
    fn occluded_steps_are_predicted() {
        let spec = BehaviorSpec::numerical();
        let t = generate_trajectory(&spec, "I", 9, 40, &GenerateOptions::default()).unwrap();
        let mut obs = observed(&t);
        for o in &mut obs[10..20] {
            *o = None;
        }
        let settings = TrackerSettings::default();
        let dyns = ParticleDynamics::linear(&settings).unwrap();
        let out = track_particles(&dyns, &obs, None, 1, &settings, 3).unwrap();
        assert_eq!(out.estimates.len(), 40);
        for kind in [ModelKind::Ekf, ModelKind::Ukf] {
            assert_eq!(track_gaussian(kind, &obs, &settings).unwrap().estimates.len(), 40);
        }
    }

    #[test]
    fn stop_policy_reports_divergence() {
        let obs = vec![Some(DVector::from_vec(vec![0.0, 10.0])), Some(DVector::from_vec(vec![1e6, 10.0]))];
        let settings = TrackerSettings {
            on_divergence: DivergencePolicy::Stop,
            ..TrackerSettings::default()
        };
        let dyns = ParticleDynamics::linear(&settings).unwrap();
        let err = track_particles(&dyns, &obs, None, 1, &settings, 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1 }));
        let settings = TrackerSettings::default();
        let out = track_particles(&dyns, &obs, None, 1, &settings, 0).unwrap();
        assert_eq!(out.alerts, vec![1]);
        assert!((out.estimates[1][0] - 1e6).abs() < 10.0);
    }
}
