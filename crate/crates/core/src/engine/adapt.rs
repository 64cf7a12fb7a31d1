//! Adaptive component management: Remove, then Add, then Merge.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::update::{propagate_state, resample_component};
use super::{ComponentEvents, EngineConfig, FnTransition, MeasurementModel};
use crate::belief::{
    empirical_moments, weighted_moments, MixtureBelief, MixtureComponent, ObservationFrame, Particle,
    StateVector,
};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, half_log_det, euclidean_sq, Gaussian};
use crate::scalar::Scalar;

const FIT_JITTER: f64 = 1e-9;

/// Normalized squared L2 distance between Gaussian fits of two components:
///
/// `(|4πΣₘ|^{-½} + |4πΣₙ|^{-½} − 2N(μₘ; μₙ, Σₘ+Σₙ)) / (|4πΣₘ|^{-½} + |4πΣₙ|^{-½})`
///
/// evaluated in log space. The result lies in `[0, 1)`.
pub fn component_distance<S: Scalar>(
    m: &MixtureComponent<S>,
    n: &MixtureComponent<S>,
) -> Result<S> {
    let a = fit(m)?;
    let b = fit(n)?;
    gaussian_fit_distance(&a.0, &a.1, &b.0, &b.1)
}

fn fit<S: Scalar>(c: &MixtureComponent<S>) -> Result<(DVector<S>, DMatrix<S>)> {
    if c.is_empty() {
        return Err(Error::InvalidInput(format!("component {} has no particles", c.id)));
    }
    let moments = empirical_moments(c)
        .or_else(|_| weighted_moments(c.particles.iter().map(|p| (&p.state, S::one()))))?;
    let d = moments.mean.len();
    Ok((moments.mean, moments.covariance + DMatrix::identity(d, d) * S::lit(FIT_JITTER)))
}

pub(crate) fn gaussian_fit_distance<S: Scalar>(
    mean_m: &DVector<S>,
    cov_m: &DMatrix<S>,
    mean_n: &DVector<S>,
    cov_n: &DMatrix<S>,
) -> Result<S> {
    let d = S::of_count(mean_m.len());
    let log_4pi = (S::lit(4.0) * S::pi()).ln();
    let self_term = |cov: &DMatrix<S>| -> Result<S> {
        let chol = cholesky_jittered(cov, S::lit(FIT_JITTER))?;
        Ok(-S::lit(0.5) * d * log_4pi - half_log_det(&chol))
    };
    let la = self_term(cov_m)?;
    let lb = self_term(cov_n)?;
    let cross = Gaussian::new(mean_n.clone(), &(cov_m + cov_n), S::lit(FIT_JITTER))?;
    let lc = cross.log_pdf(mean_m);
    let top = if la > lb { la } else { lb };
    let ea = (la - top).exp();
    let eb = (lb - top).exp();
    let ec = (lc - top).exp();
    let denom = ea + eb;
    let value = (denom - S::lit(2.0) * ec) / denom;
    let below_one = S::one() - S::default_epsilon();
    Ok(if value < S::zero() {
        S::zero()
    } else if value > below_one {
        below_one
    } else {
        value
    })
}

fn mean_of<S: Scalar>(c: &MixtureComponent<S>) -> Option<StateVector<S>> {
    weighted_moments(c.particles.iter().map(|p| (&p.state, p.weight)))
        .or_else(|_| weighted_moments(c.particles.iter().map(|p| (&p.state, S::one()))))
        .ok()
        .map(|m| m.mean)
}

fn remove_phase<S: Scalar>(
    belief: &mut MixtureBelief<S>,
    measurement: &dyn MeasurementModel<S>,
    cfg: &EngineConfig<S>,
    events: &mut ComponentEvents,
) {
    let doomed: Vec<bool> = belief
        .components
        .iter()
        .map(|c| {
            let outside = mean_of(c)
                .map(|mu| !cfg.observation_area.contains(&measurement.predicted_observation(&mu)))
                .unwrap_or(true);
            c.pi < cfg.pi_threshold || outside
        })
        .collect();
    if doomed.iter().all(|&d| d) {
        // The heaviest component always survives.
        let keep = belief
            .components
            .iter()
            .enumerate()
            .fold(0, |best, (i, c)| if c.pi > belief.components[best].pi { i } else { best });
        let survivor = belief.components.swap_remove(keep);
        events.removed.extend(belief.components.iter().map(|c| c.id));
        belief.components = vec![survivor];
    } else {
        let mut kept = Vec::with_capacity(belief.len());
        for (c, d) in belief.components.drain(..).zip(doomed) {
            if d {
                events.removed.push(c.id);
            } else {
                kept.push(c);
            }
        }
        belief.components = kept;
    }
    belief.renormalize_pis();
}

fn add_phase<S: Scalar, R: Rng + ?Sized>(
    belief: &mut MixtureBelief<S>,
    frame: &ObservationFrame<S>,
    measurement: &dyn MeasurementModel<S>,
    cfg: &EngineConfig<S>,
    rng: &mut R,
    events: &mut ComponentEvents,
) -> Result<()> {
    let Some(spawn) = &cfg.spawn else {
        return Ok(());
    };
    if frame.is_empty() {
        return Ok(());
    }
    let mut counts = vec![0usize; frame.measurements.len()];
    for p in belief.components.iter().flat_map(|c| c.particles.iter()) {
        let z = measurement.predicted_observation(&p.state);
        let mut best = 0;
        let mut best_d = S::lit(f64::INFINITY);
        for (j, m) in frame.measurements.iter().enumerate() {
            let d = euclidean_sq(m, &z);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        counts[best] += 1;
    }
    let births: Vec<usize> = (0..counts.len())
        .filter(|&j| counts[j] < cfg.min_assigned_particles)
        .collect();
    if births.is_empty() {
        return Ok(());
    }
    let existing = S::of_count(belief.len());
    let total = S::of_count(belief.len() + births.len());
    for c in &mut belief.components {
        c.pi = c.pi * existing / total;
    }
    let dim = spawn.default_state.len();
    let std: DVector<S> = spawn.covariance_diag.map(|v| v.sqrt());
    for j in births {
        let z = &frame.measurements[j];
        let mut center = spawn.default_state.clone();
        for (k, &d) in spawn.observed_dims.iter().enumerate() {
            if k < z.len() {
                center[d] = z[k];
            }
        }
        let id = belief.allocate_id();
        let around = FnTransition(|_: &StateVector<S>, _: &DVector<S>, r: &mut dyn rand::RngCore| {
            DVector::from_fn(dim, |i, _| center[i] + std[i] * S::standard_normal(r))
        });
        let mut stream = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let n = cfg.particles_per_component;
        let w = S::one() / S::of_count(n);
        let particles = (0..n)
            .map(|_| {
                let (state, feasible) = propagate_state(
                    &around,
                    &center,
                    &DVector::zeros(0),
                    &cfg.state_region,
                    super::ConstraintStrategy::Rejection,
                    cfg.max_rejection_draws,
                    &mut stream,
                );
                Particle {
                    state,
                    weight: w,
                    raw_weight: w,
                    component_id: id,
                    feasible,
                }
            })
            .collect();
        belief.components.push(MixtureComponent {
            id,
            pi: S::one() / total,
            particles,
            evidence: None,
        });
        events.added.push(id);
    }
    belief.renormalize_pis();
    Ok(())
}

fn merge_phase<S: Scalar, R: Rng + ?Sized>(
    belief: &mut MixtureBelief<S>,
    cfg: &EngineConfig<S>,
    rng: &mut R,
    events: &mut ComponentEvents,
) -> Result<()> {
    loop {
        if belief.len() < 2 {
            return Ok(());
        }
        let fits: Vec<(DVector<S>, DMatrix<S>)> =
            belief.components.iter().map(fit).collect::<Result<_>>()?;
        let mut best: Option<(usize, usize, S)> = None;
        for i in 0..fits.len() {
            for j in i + 1..fits.len() {
                let d = gaussian_fit_distance(&fits[i].0, &fits[i].1, &fits[j].0, &fits[j].1)?;
                if d < cfg.merge_threshold && best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        let Some((i, j, _)) = best else {
            return Ok(());
        };
        let (keep, absorb) = if belief.components[j].pi > belief.components[i].pi {
            (j, i)
        } else {
            (i, j)
        };
        let absorbed = belief.components[absorb].clone();
        let kept = &mut belief.components[keep];
        let total = kept.pi + absorbed.pi;
        let (pk, pa) = if total > S::zero() {
            (kept.pi / total, absorbed.pi / total)
        } else {
            (S::lit(0.5), S::lit(0.5))
        };
        for p in &mut kept.particles {
            p.weight *= pk;
        }
        kept.particles.extend(absorbed.particles.into_iter().map(|mut p| {
            p.weight *= pa;
            p.component_id = kept.id;
            p
        }));
        kept.pi = total;
        resample_component(kept, cfg.particles_per_component, rng);
        events.merged.push((kept.id, absorbed.id));
        belief.components.remove(absorb);
        belief.renormalize_pis();
    }
}

/// Remove (low weight or mean outside the observation area), Add (one new
/// component per measurement claimed by fewer than `min_assigned_particles`
/// particles) and Merge (closest pair first while below `merge_threshold`).
/// At least one component always survives.
pub fn adapt_components<S, R>(
    belief: &MixtureBelief<S>,
    frame: Option<&ObservationFrame<S>>,
    measurement: &dyn MeasurementModel<S>,
    cfg: &EngineConfig<S>,
    rng: &mut R,
) -> Result<(MixtureBelief<S>, ComponentEvents)>
where
    S: Scalar,
    R: Rng + ?Sized,
{
    let mut out = belief.clone();
    let mut events = ComponentEvents::default();
    remove_phase(&mut out, measurement, cfg, &mut events);
    if let Some(frame) = frame {
        add_phase(&mut out, frame, measurement, cfg, rng, &mut events)?;
    }
    merge_phase(&mut out, cfg, rng, &mut events)?;
    Ok((out, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::FeasibleRegion;
    use crate::engine::{LinearGaussianMeasurement, SpawnConfig};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn gaussian_component(id: usize, pi: f64, mean: f64, var: f64, n: usize) -> MixtureComponent<f64> {
        // Deterministic symmetric two-point cloud with the requested moments.
        let s = var.sqrt();
        let states = (0..n)
            .map(|i| dvector![if i % 2 == 0 { mean - s } else { mean + s }])
            .collect();
        MixtureComponent::from_states(id, pi, states)
    }

    #[test]
    fn distance_examples() {
        let a = gaussian_component(0, 0.5, 0.0, 1.0, 10);
        assert!(component_distance(&a, &a.clone()).unwrap().abs() < 1e-12);
        let b = gaussian_component(1, 0.5, 2.0, 1.0, 10);
        let d = component_distance(&a, &b).unwrap();
        assert!((d - (1.0 - (-1.0f64).exp())).abs() < 1e-8, "{d}");
        let far = gaussian_component(2, 0.5, 100.0, 1.0, 10);
        let d = component_distance(&a, &far).unwrap();
        assert!(d >= 0.9999 && d < 1.0);
    }

    #[test]
    fn closed_form_merge_example() {
        let d = gaussian_fit_distance(&dvector![0.0], &dmatrix![1.0], &dvector![0.2], &dmatrix![1.0]).unwrap();
        assert!((d - (1.0 - (-0.01f64).exp())).abs() < 1e-12);
        assert!(d < 0.05);
    }

    fn meas1() -> LinearGaussianMeasurement<f64> {
        LinearGaussianMeasurement::new(dmatrix![1.0], dmatrix![1.0]).unwrap()
    }

    #[test]
    fn remove_low_weight_component() {
        let b = MixtureBelief::new(0, vec![
            gaussian_component(0, 0.98, 0.0, 1.0, 10),
            gaussian_component(1, 0.02, 50.0, 1.0, 10),
        ]).unwrap();
        let cfg = EngineConfig::new(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, events) = adapt_components(&b, None, &meas1(), &cfg, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.components[0].pi, 1.0);
        assert_eq!(events.removed, vec![1]);
    }

    #[test]
    fn remove_outside_observation_area_but_keep_last() {
        let b = MixtureBelief::new(0, vec![
            gaussian_component(0, 0.3, 500.0, 1.0, 10),
            gaussian_component(1, 0.7, 600.0, 1.0, 10),
        ]).unwrap();
        let mut cfg = EngineConfig::new(1, 1);
        cfg.observation_area = FeasibleRegion::new(vec![0.0], vec![100.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, events) = adapt_components(&b, None, &meas1(), &cfg, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.components[0].id, 1);
        assert_eq!(events.removed, vec![0]);
    }

    #[test]
    fn add_component_at_unclaimed_measurement() {
        let b = MixtureBelief::new(0, vec![gaussian_component(0, 1.0, 0.0, 0.1, 50)]).unwrap();
        let mut cfg = EngineConfig::new(1, 1);
        cfg.spawn = Some(SpawnConfig {
            observed_dims: vec![0],
            default_state: dvector![0.0],
            covariance_diag: dvector![0.25],
        });
        cfg.particles_per_component = 40;
        let frame = ObservationFrame::new(1, vec![dvector![0.0], dvector![30.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (out, events) = adapt_components(&b, Some(&frame), &meas1(), &cfg, &mut rng).unwrap();
        assert_eq!(events.added.len(), 1);
        assert_eq!(out.len(), 2);
        let new = out.component(events.added[0]).unwrap();
        assert_eq!(new.len(), 40);
        let mean = empirical_moments(new).unwrap().mean[0];
        assert!((mean - 30.0).abs() < 0.5);
        out.validate(1e-9).unwrap();
    }

    #[test]
    fn merge_close_components() {
        let b = MixtureBelief::new(0, vec![
            gaussian_component(0, 0.5, 0.0, 1.0, 20),
            gaussian_component(1, 0.5, 0.2, 1.0, 20),
        ]).unwrap();
        let cfg = EngineConfig::new(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, events) = adapt_components(&b, None, &meas1(), &cfg, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(events.merged.len(), 1);
        assert_eq!(out.components[0].len(), cfg.particles_per_component);
        out.validate(1e-9).unwrap();
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_bounded(
            ma in -5.0f64..5.0, mb in -5.0f64..5.0, mc in -5.0f64..5.0,
            va in 0.05f64..4.0, vb in 0.05f64..4.0, rho in -0.9f64..0.9,
        ) {
            let cov_a = dmatrix![va, rho * va.sqrt(); rho * va.sqrt(), 1.0];
            let cov_b = dmatrix![vb, 0.0; 0.0, 0.5];
            let a = dvector![ma, mc];
            let b = dvector![mb, 0.0];
            let d_ab = gaussian_fit_distance(&a, &cov_a, &b, &cov_b).unwrap();
            let d_ba = gaussian_fit_distance(&b, &cov_b, &a, &cov_a).unwrap();
            prop_assert!((d_ab - d_ba).abs() <= 1e-12);
            prop_assert!((0.0..1.0).contains(&d_ab));
        }

        #[test]
        fn distance_monotone_in_separation(s1 in 0.0f64..5.0, extra in 0.0f64..5.0, var in 0.1f64..3.0) {
            let c = dmatrix![var];
            let near = gaussian_fit_distance(&dvector![0.0], &c, &dvector![s1], &c).unwrap();
            let far = gaussian_fit_distance(&dvector![0.0], &c, &dvector![s1 + extra], &c).unwrap();
            prop_assert!(far >= near - 1e-15);
        }
    }
}
