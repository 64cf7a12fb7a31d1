//! Particle mixture beliefs and the weight bookkeeping around them.
//!
//! A [`MixtureBelief`] is a set of [`MixtureComponent`]s, each carrying its own
//! component weight `pi` and a per-component normalized particle set. The
//! component weight lives on the component only; particles refer back to it
//! through `component_id`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type StateVector<S> = DVector<S>;
/// Exterior information fed to transition models; may be empty.
pub type ContextVector<S> = DVector<S>;
pub type Observation<S> = DVector<S>;

/// Weight sums at or below this value count as all-zero.
pub const ZERO_WEIGHT_FLOOR: f64 = 1e-300;

/// Tolerance used by [`MixtureBelief::validate`] for weight sums.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Measurements received at one time step. An empty frame means total occlusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame<S: Scalar> {
    pub step: usize,
    pub measurements: Vec<Observation<S>>,
}

impl<S: Scalar> ObservationFrame<S> {
    pub fn new(step: usize, measurements: Vec<Observation<S>>) -> Self {
        Self { step, measurements }
    }

    pub fn empty(step: usize) -> Self {
        Self {
            step,
            measurements: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }
}

type Predicate<S> = Arc<dyn Fn(&StateVector<S>) -> bool + Send + Sync>;

/// Axis-aligned box, optionally intersected with an arbitrary membership test.
#[derive(Clone)]
pub struct FeasibleRegion<S: Scalar> {
    lower: Vec<S>,
    upper: Vec<S>,
    predicate: Option<Predicate<S>>,
}

impl<S: Scalar> fmt::Debug for FeasibleRegion<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeasibleRegion")
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .field("predicate", &self.predicate.is_some())
            .finish()
    }
}

impl<S: Scalar> FeasibleRegion<S> {
    pub fn new(lower: Vec<S>, upper: Vec<S>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidConfig(
                "feasible region has lower bound above upper bound".into(),
            ));
        }
        Ok(Self {
            lower,
            upper,
            predicate: None,
        })
    }

    /// The whole space of the given dimension.
    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![S::lit(f64::NEG_INFINITY); dim],
            upper: vec![S::lit(f64::INFINITY); dim],
            predicate: None,
        }
    }

    pub fn with_predicate<F>(mut self, predicate: F) -> Self
    where
        F: Fn(&StateVector<S>) -> bool + Send + Sync + 'static,
    {
        self.predicate = Some(Arc::new(predicate));
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[S] {
        &self.lower
    }

    pub fn upper(&self) -> &[S] {
        &self.upper
    }

    /// Membership test. Coordinates beyond the box dimension are unconstrained.
    pub fn contains(&self, x: &StateVector<S>) -> bool {
        let in_box = self
            .lower
            .iter()
            .zip(&self.upper)
            .zip(x.iter())
            .all(|((l, u), v)| v >= l && v <= u);
        in_box && self.predicate.as_ref().is_none_or(|p| p(x))
    }
}

/// A weighted state hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle<S: Scalar> {
    pub state: StateVector<S>,
    /// Normalized weight within its component.
    pub weight: S,
    /// Unnormalized weight from the latest measurement update.
    pub raw_weight: S,
    pub component_id: usize,
    pub feasible: bool,
}

impl<S: Scalar> Particle<S> {
    pub fn new(state: StateVector<S>, weight: S, component_id: usize) -> Self {
        Self {
            state,
            weight,
            raw_weight: weight,
            component_id,
            feasible: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent<S: Scalar> {
    pub id: usize,
    pub pi: S,
    pub particles: Vec<Particle<S>>,
    /// Sum of raw weights from the latest measurement update, `None` when the
    /// component was not updated at this step.
    pub evidence: Option<S>,
}

impl<S: Scalar> MixtureComponent<S> {
    /// Equally weighted particles at the given states.
    pub fn from_states(id: usize, pi: S, states: Vec<StateVector<S>>) -> Self {
        let w = S::one() / S::of_count(states.len().max(1));
        let particles = states.into_iter().map(|s| Particle::new(s, w, id)).collect();
        Self {
            id,
            pi,
            particles,
            evidence: None,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<S> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    pub fn weight_sum(&self) -> S {
        self.particles.iter().fold(S::zero(), |a, p| a + p.weight)
    }

    pub fn dim(&self) -> usize {
        self.particles.first().map_or(0, |p| p.state.len())
    }
}

/// The empirical mixture posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBelief<S: Scalar> {
    pub step: usize,
    pub components: Vec<MixtureComponent<S>>,
    next_id: usize,
}

impl<S: Scalar> MixtureBelief<S> {
    pub fn new(step: usize, components: Vec<MixtureComponent<S>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("a belief needs at least one component".into()));
        }
        let mut ids: Vec<usize> = components.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate component ids".into()));
        }
        let next_id = ids.last().map_or(0, |m| m + 1);
        Ok(Self {
            step,
            components,
            next_id,
        })
    }

    /// One component per entry of `groups`, equal component weights.
    pub fn from_state_groups(groups: Vec<Vec<StateVector<S>>>) -> Result<Self> {
        let m = S::of_count(groups.len().max(1));
        let components = groups
            .into_iter()
            .enumerate()
            .map(|(id, states)| MixtureComponent::from_states(id, S::one() / m, states))
            .collect();
        Self::new(0, components)
    }

    pub fn allocate_id(&mut self) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn particle_count(&self) -> usize {
        self.components.iter().map(|c| c.len()).sum()
    }

    pub fn component(&self, id: usize) -> Option<&MixtureComponent<S>> {
        self.components.iter().find(|c| c.id == id)
    }

    pub fn pis(&self) -> Vec<S> {
        self.components.iter().map(|c| c.pi).collect()
    }

    pub(crate) fn renormalize_pis(&mut self) {
        let total = self.components.iter().fold(S::zero(), |a, c| a + c.pi);
        if total > S::lit(ZERO_WEIGHT_FLOOR) {
            for c in &mut self.components {
                c.pi /= total;
            }
        } else {
            let u = S::one() / S::of_count(self.components.len());
            for c in &mut self.components {
                c.pi = u;
            }
        }
    }

    /// Checks the weight invariants: `Σ pi = 1`, per-component `Σ w = 1`,
    /// weights in range, finite states and matching component ids.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let tol = S::lit(tol);
        let pi_sum = self.components.iter().fold(S::zero(), |a, c| a + c.pi);
        if (pi_sum - S::one()).abs() > tol {
            return Err(Error::InvalidInput(format!("component weights sum to {pi_sum}")));
        }
        for c in &self.components {
            if c.pi < S::zero() || c.pi > S::one() + tol {
                return Err(Error::InvalidInput(format!("component {} has pi {}", c.id, c.pi)));
            }
            let w_sum = c.weight_sum();
            if (w_sum - S::one()).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "component {} particle weights sum to {w_sum}",
                    c.id
                )));
            }
            for p in &c.particles {
                if p.component_id != c.id {
                    return Err(Error::InvalidInput("particle component id mismatch".into()));
                }
                if p.weight < S::zero() || p.raw_weight < S::zero() {
                    return Err(Error::InvalidInput("negative particle weight".into()));
                }
                if p.state.iter().any(|v| !v.is_finite_value()) {
                    return Err(Error::InvalidInput("non-finite particle state".into()));
                }
            }
        }
        Ok(())
    }
}

/// Divides each raw weight by the total.
pub fn normalize_weights<S: Scalar>(raw: &[S]) -> Result<Vec<S>> {
    let total = raw.iter().fold(S::zero(), |a, &w| a + w);
    if !(total > S::lit(ZERO_WEIGHT_FLOOR)) || !total.is_finite_value() {
        return Err(Error::AllZeroWeights);
    }
    Ok(raw.iter().map(|&w| w / total).collect())
}

/// `1 / Σ w²` for normalized weights.
pub fn effective_sample_size<S: Scalar>(weights: &[S]) -> S {
    let sq = weights.iter().fold(S::zero(), |a, &w| a + w * w);
    if sq > S::zero() {
        S::one() / sq
    } else {
        S::zero()
    }
}

/// Systematic resampling: one uniform offset, `count` evenly spaced strata.
/// Returns parent indices in nondecreasing order.
pub fn systematic_resample<S: Scalar, R: Rng + ?Sized>(
    weights: &[S],
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let offset: f64 = rng.random();
    systematic_resample_with_offset(weights, count, offset)
}

pub(crate) fn systematic_resample_with_offset<S: Scalar>(
    weights: &[S],
    count: usize,
    offset: f64,
) -> Vec<usize> {
    if weights.is_empty() || count == 0 {
        return Vec::new();
    }
    let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
    let n = count as f64;
    let last = weights.len() - 1;
    let mut out = Vec::with_capacity(count);
    let mut cumulative = weights[0].as_f64() / total;
    let mut i = 0;
    for j in 0..count {
        let u = (offset + j as f64) / n;
        while u >= cumulative && i < last {
            i += 1;
            cumulative += weights[i].as_f64() / total;
        }
        out.push(i);
    }
    out
}

/// Weighted mean and weighted covariance of a particle set.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<S: Scalar> {
    pub mean: StateVector<S>,
    pub covariance: DMatrix<S>,
}

/// Weighted mean `Σ wᵢxᵢ` and covariance `Σ wᵢ(xᵢ-μ)(xᵢ-μ)ᵀ` (no Bessel
/// correction), symmetrized. Weights are renormalized internally.
pub fn empirical_moments<S: Scalar>(component: &MixtureComponent<S>) -> Result<Moments<S>> {
    weighted_moments(component.particles.iter().map(|p| (&p.state, p.weight)))
}

pub(crate) fn weighted_moments<'a, S, I>(atoms: I) -> Result<Moments<S>>
where
    S: Scalar,
    I: Iterator<Item = (&'a StateVector<S>, S)> + Clone,
{
    let total = atoms.clone().fold(S::zero(), |a, (_, w)| a + w);
    if !(total > S::lit(ZERO_WEIGHT_FLOOR)) {
        return Err(Error::AllZeroWeights);
    }
    let dim = atoms.clone().next().map_or(0, |(x, _)| x.len());
    let mut mean = DVector::zeros(dim);
    for (x, w) in atoms.clone() {
        mean.axpy(w / total, x, S::one());
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (x, w) in atoms {
        let d = x - &mean;
        cov.ger(w / total, &d, &d, S::one());
    }
    let cov = (&cov + cov.transpose()) * S::lit(0.5);
    Ok(Moments {
        mean,
        covariance: cov,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSummary<S: Scalar> {
    pub id: usize,
    pub pi: S,
    pub mean: StateVector<S>,
    pub covariance: DMatrix<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSummary<S: Scalar> {
    pub step: usize,
    /// Sorted by descending `pi`.
    pub components: Vec<ComponentSummary<S>>,
    pub overall_mean: StateVector<S>,
}

pub fn belief_summary<S: Scalar>(belief: &MixtureBelief<S>) -> Result<BeliefSummary<S>> {
    let mut components = Vec::with_capacity(belief.len());
    for c in &belief.components {
        let m = empirical_moments(c)?;
        components.push(ComponentSummary {
            id: c.id,
            pi: c.pi,
            mean: m.mean,
            covariance: m.covariance,
        });
    }
    let dim = components.first().map_or(0, |c| c.mean.len());
    let mut overall_mean = DVector::zeros(dim);
    for c in &components {
        overall_mean.axpy(c.pi, &c.mean, S::one());
    }
    components.sort_by(|a, b| b.pi.partial_cmp(&a.pi).unwrap_or(std::cmp::Ordering::Equal));
    Ok(BeliefSummary {
        step: belief.step,
        components,
        overall_mean,
    })
}
