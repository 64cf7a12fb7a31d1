use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ConstraintStrategy, EngineConfig, LikelihoodCombination, MeasurementModel,
    StepReport, TransitionModel, TransitionModels,
};
use crate::belief::{
    effective_sample_size, systematic_resample, weighted_moments, ContextVector, FeasibleRegion,
    MixtureBelief, MixtureComponent, ObservationFrame, Particle, StateVector, ZERO_WEIGHT_FLOOR,
};
use crate::error::{Error, Result};
use crate::linalg::euclidean_sq;
use crate::scalar::Scalar;

/// Draws one successor state under the configured constraint strategy.
/// Returns the state and its feasibility flag.
pub fn propagate_state<S: Scalar>(
    model: &dyn TransitionModel<S>,
    state: &StateVector<S>,
    context: &ContextVector<S>,
    region: &FeasibleRegion<S>,
    strategy: ConstraintStrategy,
    max_draws: usize,
    rng: &mut dyn RngCore,
) -> (StateVector<S>, bool) {
    let draws = match strategy {
        ConstraintStrategy::ZeroWeight => 1,
        ConstraintStrategy::Rejection => max_draws.max(1),
    };
    let mut next = model.sample(state, context, rng);
    if region.contains(&next) {
        return (next, true);
    }
    for _ in 1..draws {
        next = model.sample(state, context, rng);
        if region.contains(&next) {
            return (next, true);
        }
    }
    (next, false)
}

/// Moves every particle through its component's transition model. Weights
/// are left alone; infeasible particles get `raw_weight = 0`.
///
/// Each component draws from its own stream seeded from `rng`, so the result
/// does not depend on the order components are processed in.
pub fn prior_update<S, M, R>(
    belief: &MixtureBelief<S>,
    models: &M,
    context: &ContextVector<S>,
    region: &FeasibleRegion<S>,
    cfg: &EngineConfig<S>,
    rng: &mut R,
) -> Result<MixtureBelief<S>>
where
    S: Scalar,
    M: TransitionModels<S> + ?Sized,
    R: Rng + ?Sized,
{
    let mut out = belief.clone();
    for component in &mut out.components {
        let model = models
            .model_for(component.id)
            .ok_or(Error::MissingModel(component.id))?;
        let mut stream = ChaCha8Rng::seed_from_u64(rng.next_u64());
        for p in &mut component.particles {
            let (next, feasible) = propagate_state(
                model,
                &p.state,
                context,
                region,
                cfg.strategy,
                cfg.max_rejection_draws,
                &mut stream,
            );
            p.state = next;
            p.feasible = feasible;
            if !feasible {
                p.raw_weight = S::zero();
            }
        }
        component.evidence = None;
    }
    Ok(out)
}

fn component_mean<S: Scalar>(c: &MixtureComponent<S>) -> Option<StateVector<S>> {
    if c.particles.is_empty() {
        return None;
    }
    weighted_moments(c.particles.iter().map(|p| (&p.state, p.weight)))
        .or_else(|_| weighted_moments(c.particles.iter().map(|p| (&p.state, S::one()))))
        .ok()
        .map(|m| m.mean)
}

/// Flags components with no measurement within `miss_distance` of the
/// predicted observation at their mean. An empty frame flags everything.
pub fn assert_measurement_missing<S: Scalar>(
    belief: &MixtureBelief<S>,
    frame: &ObservationFrame<S>,
    measurement: &dyn MeasurementModel<S>,
    cfg: &EngineConfig<S>,
) -> Vec<bool> {
    if frame.is_empty() {
        return vec![true; belief.len()];
    }
    if !cfg.missing_assertion {
        return vec![false; belief.len()];
    }
    let gate = cfg.miss_distance * cfg.miss_distance;
    belief
        .components
        .iter()
        .map(|c| match component_mean(c) {
            None => true,
            Some(mean) => {
                let z = measurement.predicted_observation(&mean);
                !frame.measurements.iter().any(|m| euclidean_sq(m, &z) <= gate)
            }
        })
        .collect()
}

/// Alert when ESS drops below `ess_alert_threshold` or the best raw
/// likelihood drops below `likelihood_alert_threshold`.
pub fn divergence_alert<S: Scalar>(
    ess: &[S],
    max_likelihoods: &[S],
    cfg: &EngineConfig<S>,
) -> Vec<bool> {
    ess.iter()
        .zip(max_likelihoods)
        .map(|(&e, &l)| e < cfg.ess_alert_threshold || !(l >= cfg.likelihood_alert_threshold))
        .collect()
}

fn combined_likelihood<S: Scalar>(
    frame: &ObservationFrame<S>,
    measurement: &dyn MeasurementModel<S>,
    state: &StateVector<S>,
    combination: LikelihoodCombination,
) -> S {
    let scores = frame.measurements.iter().map(|z| measurement.likelihood(z, state));
    match combination {
        LikelihoodCombination::Sum => scores.fold(S::zero(), |a, l| a + l),
        LikelihoodCombination::Max => scores.fold(S::zero(), |a, l| if l > a { l } else { a }),
    }
}

/// Resamples a component to `count` equally weighted particles.
pub(crate) fn resample_component<S: Scalar, R: Rng + ?Sized>(
    component: &mut MixtureComponent<S>,
    count: usize,
    rng: &mut R,
) {
    let weights = component.weights();
    let parents = systematic_resample(&weights, count, rng);
    let w = S::one() / S::of_count(count);
    component.particles = parents
        .into_iter()
        .map(|i| {
            let src = &component.particles[i];
            Particle {
                state: src.state.clone(),
                weight: w,
                raw_weight: w,
                component_id: component.id,
                feasible: src.feasible,
            }
        })
        .collect();
}

/// Zero-weights infeasible particles and renormalizes. Returns `false` when
/// no feasible mass is left, in which case the weights are kept as they were.
pub(crate) fn mask_infeasible<S: Scalar>(c: &mut MixtureComponent<S>) -> bool {
    if c.particles.iter().all(|p| p.feasible) {
        return true;
    }
    let total = c
        .particles
        .iter()
        .filter(|p| p.feasible)
        .fold(S::zero(), |a, p| a + p.weight);
    if !(total > S::lit(ZERO_WEIGHT_FLOOR)) {
        return false;
    }
    for p in &mut c.particles {
        p.weight = if p.feasible { p.weight / total } else { S::zero() };
    }
    true
}

/// Constraint mask for every component of a belief that sees no measurement.
pub(crate) fn mask_unmeasured<S: Scalar>(belief: &mut MixtureBelief<S>, report: &mut StepReport<S>) {
    for (c, stats) in belief.components.iter_mut().zip(report.components.iter_mut()) {
        stats.alert |= !mask_infeasible(c);
    }
}

/// Reweights particles against the frame, normalizes per component,
/// resamples degenerate components, then updates component weights.
pub fn measurement_update<S, R>(
    belief: &MixtureBelief<S>,
    frame: &ObservationFrame<S>,
    measurement: &dyn MeasurementModel<S>,
    cfg: &EngineConfig<S>,
    rng: &mut R,
) -> Result<(MixtureBelief<S>, StepReport<S>)>
where
    S: Scalar,
    R: Rng + ?Sized,
{
    let missing = assert_measurement_missing(belief, frame, measurement, cfg);
    let mut out = belief.clone();
    let mut report = StepReport::idle(belief);

    for ((c, stats), &is_missing) in out
        .components
        .iter_mut()
        .zip(report.components.iter_mut())
        .zip(&missing)
    {
        c.evidence = None;
        if is_missing {
            stats.missing = true;
            stats.alert |= !mask_infeasible(c);
            continue;
        }
        let mut max_lik = S::zero();
        let mut evidence = S::zero();
        for p in &mut c.particles {
            let lik = combined_likelihood(frame, measurement, &p.state, cfg.likelihood_combination);
            if lik > max_lik {
                max_lik = lik;
            }
            let mask = if p.feasible { S::one() } else { S::zero() };
            p.raw_weight = mask * p.weight * lik;
            evidence += p.raw_weight;
        }
        stats.max_likelihood = Some(max_lik);
        if !(evidence > S::lit(ZERO_WEIGHT_FLOOR)) || !evidence.is_finite_value() {
            stats.ess = Some(S::zero());
            stats.alert = true;
            c.evidence = Some(S::zero());
            continue;
        }
        c.evidence = Some(evidence);
        for p in &mut c.particles {
            p.weight = p.raw_weight / evidence;
        }
        let ess = effective_sample_size(&c.weights());
        stats.ess = Some(ess);
        stats.alert = divergence_alert(&[ess], &[max_lik], cfg)[0];
        if ess < cfg.ess_threshold_ratio * S::of_count(c.len()) {
            resample_component(c, cfg.particles_per_component, rng);
            stats.resampled = true;
        }
    }

    match update_component_weights(&out) {
        Ok(updated) => out = updated,
        Err(Error::AllZeroWeights) => {
            for s in report.components.iter_mut().filter(|s| !s.missing) {
                s.alert = true;
            }
        }
        Err(e) => return Err(e),
    }
    report.divergence = report.components.iter().any(|s| s.alert);
    Ok((out, report))
}

/// `πₘ ← πₘ·Σw̄ₘ / Σₙ πₙ·Σw̄ₙ` over the components updated at this step.
/// Components without fresh evidence keep their weight; the updated ones
/// share the remaining mass.
pub fn update_component_weights<S: Scalar>(belief: &MixtureBelief<S>) -> Result<MixtureBelief<S>> {
    let updated_mass = belief
        .components
        .iter()
        .filter(|c| c.evidence.is_some())
        .fold(S::zero(), |a, c| a + c.pi);
    let denom = belief
        .components
        .iter()
        .filter_map(|c| c.evidence.map(|e| c.pi * e))
        .fold(S::zero(), |a, v| a + v);
    if belief.components.iter().all(|c| c.evidence.is_none()) {
        return Ok(belief.clone());
    }
    if !(denom > S::lit(ZERO_WEIGHT_FLOOR)) {
        return Err(Error::AllZeroWeights);
    }
    let mut out = belief.clone();
    for c in &mut out.components {
        if let Some(e) = c.evidence {
            c.pi = updated_mass * c.pi * e / denom;
        }
    }
    out.renormalize_pis();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{FnTransition, LinearGaussianMeasurement, Shared};
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector, DVector};

    fn cfg1() -> EngineConfig<f64> {
        EngineConfig::new(1, 1)
    }

    fn belief(groups: Vec<Vec<f64>>) -> MixtureBelief<f64> {
        MixtureBelief::from_state_groups(
            groups
                .into_iter()
                .map(|g| g.into_iter().map(|x| dvector![x]).collect())
                .collect(),
        )
        .unwrap()
    }

    struct TableLikelihood(Vec<(f64, f64)>);
    impl MeasurementModel<f64> for TableLikelihood {
        fn likelihood(&self, _z: &DVector<f64>, x: &DVector<f64>) -> f64 {
            self.0.iter().find(|(s, _)| *s == x[0]).map_or(0.0, |(_, l)| *l)
        }
        fn predicted_observation(&self, x: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
    }

    #[test]
    fn identity_transition_keeps_states() {
        let b = belief(vec![vec![1.0, 2.0, 3.0]]);
        let id = FnTransition(|x: &DVector<f64>, _: &DVector<f64>, _: &mut dyn RngCore| x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = cfg1();
        let out = prior_update(&b, &Shared(&id), &DVector::zeros(0), &cfg.state_region, &cfg, &mut rng).unwrap();
        assert_eq!(out.components[0].particles, b.components[0].particles);
    }

    #[test]
    fn zero_weight_strategy_flags_infeasible() {
        let b = belief(vec![vec![1.0]]);
        let shift = FnTransition(|x: &DVector<f64>, _: &DVector<f64>, _: &mut dyn RngCore| x.add_scalar(-5.0));
        let region = FeasibleRegion::new(vec![0.0], vec![f64::INFINITY]).unwrap();
        let cfg = cfg1();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = prior_update(&b, &Shared(&shift), &DVector::zeros(0), &region, &cfg, &mut rng).unwrap();
        let p = &out.components[0].particles[0];
        assert!(!p.feasible);
        assert_eq!(p.raw_weight, 0.0);
        assert_eq!(p.weight, 1.0, "weights untouched by the prior update");
    }

    #[test]
    fn rejection_strategy_acceptance_rate() {
        // x' = x + u, u ~ U[-2, 2], from 0.5 with x' >= 0: P(accept) = 2.5 / 4.
        let jitter = FnTransition(|x: &DVector<f64>, _: &DVector<f64>, rng: &mut dyn RngCore| {
            x.add_scalar(rng.random_range(-2.0..2.0))
        });
        let region = FeasibleRegion::new(vec![0.0], vec![f64::INFINITY]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut accepted = 0usize;
        for _ in 0..n {
            let (x, ok) = propagate_state(&jitter, &dvector![0.5], &DVector::zeros(0), &region,
                                          ConstraintStrategy::ZeroWeight, 1, &mut rng);
            if ok {
                accepted += 1;
                assert!(x[0] >= 0.0);
            }
        }
        let frac = accepted as f64 / n as f64;
        let se = (0.625 * 0.375 / n as f64).sqrt();
        assert!((frac - 0.625).abs() < 4.0 * se, "acceptance {frac}");

        let b = belief(vec![vec![0.5; 2000]]);
        let mut cfg = cfg1();
        cfg.strategy = ConstraintStrategy::Rejection;
        let out = prior_update(&b, &Shared(&jitter), &DVector::zeros(0), &region, &cfg, &mut rng).unwrap();
        assert!(out.components[0].particles.iter().all(|p| p.feasible && p.state[0] >= 0.0));
    }

    #[test]
    fn missing_model_is_an_error() {
        let b = belief(vec![vec![1.0]]);
        let models: std::collections::HashMap<usize, Box<dyn TransitionModel<f64>>> = Default::default();
        let cfg = cfg1();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = prior_update(&b, &models, &DVector::zeros(0), &cfg.state_region, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::MissingModel(0)));
    }

    #[test]
    fn posterior_weights_from_likelihoods() {
        let b = belief(vec![vec![1.0, 2.0]]);
        let meas = TableLikelihood(vec![(1.0, 0.3), (2.0, 0.1)]);
        let mut cfg = cfg1();
        cfg.missing_assertion = false;
        cfg.ess_threshold_ratio = 0.1;
        let frame = ObservationFrame::new(1, vec![dvector![0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, report) = measurement_update(&b, &frame, &meas, &cfg, &mut rng).unwrap();
        let w = out.components[0].weights();
        assert_abs_diff_eq!(w[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.25, epsilon = 1e-12);
        assert!(!report.divergence);
    }

    #[test]
    fn infeasible_particle_gets_zero_raw_weight() {
        let mut b = belief(vec![vec![1.0, 2.0]]);
        b.components[0].particles[0].feasible = false;
        let meas = TableLikelihood(vec![(1.0, 0.9), (2.0, 0.1)]);
        let mut cfg = cfg1();
        cfg.missing_assertion = false;
        cfg.ess_threshold_ratio = 0.1;
        let frame = ObservationFrame::new(1, vec![dvector![0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = measurement_update(&b, &frame, &meas, &cfg, &mut rng).unwrap();
        assert_eq!(out.components[0].particles[0].raw_weight, 0.0);
        assert_eq!(out.components[0].particles[0].weight, 0.0);
    }

    #[test]
    fn empty_frame_leaves_weights_and_pis() {
        let mut b = belief(vec![vec![1.0, 2.0], vec![5.0]]);
        b.components[0].particles[0].weight = 0.9;
        b.components[0].particles[1].weight = 0.1;
        b.components[0].pi = 0.7;
        b.components[1].pi = 0.3;
        let meas = LinearGaussianMeasurement::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, report) = measurement_update(&b, &ObservationFrame::empty(1), &meas, &cfg1(), &mut rng).unwrap();
        assert_eq!(out.pis(), b.pis());
        assert_eq!(out.components[0].weights(), vec![0.9, 0.1]);
        assert!(report.all_missing());
    }

    #[test]
    fn all_zero_likelihood_raises_alert_without_renormalizing() {
        let b = belief(vec![vec![1.0, 2.0]]);
        let meas = TableLikelihood(vec![]);
        let mut cfg = cfg1();
        cfg.missing_assertion = false;
        let frame = ObservationFrame::new(1, vec![dvector![0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, report) = measurement_update(&b, &frame, &meas, &cfg, &mut rng).unwrap();
        assert!(report.divergence);
        assert_eq!(out.components[0].weights(), vec![0.5, 0.5]);
    }

    #[test]
    fn component_weight_examples() {
        let mut b = belief(vec![vec![0.0], vec![1.0]]);
        b.components[0].evidence = Some(0.3);
        b.components[1].evidence = Some(0.1);
        let out = update_component_weights(&b).unwrap();
        assert_abs_diff_eq!(out.components[0].pi, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(out.components[1].pi, 0.25, epsilon = 1e-12);

        b.components[1].evidence = Some(0.3);
        let out = update_component_weights(&b).unwrap();
        assert_abs_diff_eq!(out.components[0].pi, 0.5, epsilon = 1e-12);

        let mut single = belief(vec![vec![0.0]]);
        single.components[0].evidence = Some(1e-5);
        assert_eq!(update_component_weights(&single).unwrap().components[0].pi, 1.0);

        b.components[0].evidence = Some(0.0);
        b.components[1].evidence = Some(0.0);
        assert!(matches!(update_component_weights(&b), Err(Error::AllZeroWeights)));
    }

    #[test]
    fn missing_component_keeps_its_pi() {
        let mut b = belief(vec![vec![0.0], vec![1.0], vec![2.0]]);
        b.components[0].pi = 0.2;
        b.components[1].pi = 0.3;
        b.components[2].pi = 0.5;
        b.components[0].evidence = Some(0.3);
        b.components[1].evidence = Some(0.1);
        let out = update_component_weights(&b).unwrap();
        assert_abs_diff_eq!(out.components[2].pi, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.components[0].pi, 0.5 * 0.06 / 0.09, epsilon = 1e-12);
    }

    #[test]
    fn missing_assertion_rules() {
        let b = belief(vec![vec![0.0]]);
        let meas = LinearGaussianMeasurement::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        let mut cfg = cfg1();
        cfg.miss_distance = 1.0;
        assert_eq!(assert_measurement_missing(&b, &ObservationFrame::empty(1), &meas, &cfg), vec![true]);
        let at_mean = ObservationFrame::new(1, vec![dvector![0.0]]);
        assert_eq!(assert_measurement_missing(&b, &at_mean, &meas, &cfg), vec![false]);
        let far = ObservationFrame::new(1, vec![dvector![2.0]]);
        assert_eq!(assert_measurement_missing(&b, &far, &meas, &cfg), vec![true]);
    }

    #[test]
    fn divergence_alert_rules() {
        let mut cfg = cfg1();
        cfg.ess_alert_threshold = 50.0;
        assert_eq!(divergence_alert(&[100.0], &[0.5], &cfg), vec![false]);
        assert_eq!(divergence_alert(&[0.0], &[0.0], &cfg), vec![true]);
        cfg.ess_alert_threshold = 10.0;
        assert_eq!(divergence_alert(&[1.0], &[0.5], &cfg), vec![true]);
    }
}
