//! Hidden Markov models with diagonal Gaussian emissions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::systematic_resample;
use crate::error::{Error, Result};
use crate::evolution::kmeans;
use crate::scalar::{log_sum_exp, Scalar};

pub const VARIANCE_FLOOR: f64 = 1e-8;
const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GaussianHmm<S: Scalar> {
    pub initial: Vec<S>,
    /// Row-stochastic: `transition[(i, j)] = P(next = j | current = i)`.
    pub transition: DMatrix<S>,
    pub means: Vec<DVector<S>>,
    pub variances: Vec<DVector<S>>,
}

impl<S: Scalar> GaussianHmm<S> {
    pub fn new(
        initial: Vec<S>,
        transition: DMatrix<S>,
        means: Vec<DVector<S>>,
        variances: Vec<DVector<S>>,
    ) -> Result<Self> {
        let n = initial.len();
        if n == 0 {
            return Err(Error::InvalidInput("HMM needs at least one state".into()));
        }
        if transition.nrows() != n || transition.ncols() != n || means.len() != n || variances.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: transition.nrows(),
            });
        }
        let tol = S::lit(STOCHASTIC_TOL);
        let sums_to_one = |it: &mut dyn Iterator<Item = S>| {
            let mut total = S::zero();
            for v in it {
                if v < S::zero() {
                    return false;
                }
                total += v;
            }
            (total - S::one()).abs() <= tol
        };
        if !sums_to_one(&mut initial.iter().copied()) {
            return Err(Error::InvalidInput("initial distribution must sum to 1".into()));
        }
        for row in transition.row_iter() {
            if !sums_to_one(&mut row.iter().copied()) {
                return Err(Error::InvalidInput("transition rows must sum to 1".into()));
            }
        }
        let dim = means[0].len();
        for (m, v) in means.iter().zip(&variances) {
            if m.len() != dim || v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.len().max(v.len()),
                });
            }
            if v.iter().any(|&x| x < S::lit(VARIANCE_FLOOR)) {
                return Err(Error::InvalidInput("emission variance below floor".into()));
            }
        }
        Ok(Self {
            initial,
            transition,
            means,
            variances,
        })
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn log_emission(&self, state: usize, x: &DVector<S>) -> S {
        let half = S::lit(0.5);
        let ln_two_pi = S::two_pi().ln();
        self.means[state]
            .iter()
            .zip(self.variances[state].iter())
            .zip(x.iter())
            .fold(S::zero(), |acc, ((&m, &v), &xi)| {
                let d = xi - m;
                acc - half * (ln_two_pi + v.ln() + d * d / v)
            })
    }

    /// Stationary-ish state occupancy: the initial distribution pushed through
    /// the chain until it stops moving (at most 1000 steps).
    pub fn occupancy(&self) -> Vec<S> {
        let mut p = DVector::from_vec(self.initial.clone());
        let at = self.transition.transpose();
        for _ in 0..1000 {
            let next = &at * &p;
            let done = (&next - &p).amax() < S::lit(1e-12);
            p = next;
            if done {
                break;
            }
        }
        let total = p.sum();
        p.iter().map(|&v| v / total).collect()
    }

    /// Draws a state path and observations of length `len`.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> (Vec<usize>, Vec<DVector<S>>) {
        let mut states = Vec::with_capacity(len);
        let mut obs = Vec::with_capacity(len);
        let mut s = systematic_resample(&self.initial, 1, rng)[0];
        for t in 0..len {
            if t > 0 {
                let row: Vec<S> = self.transition.row(s).iter().copied().collect();
                s = systematic_resample(&row, 1, rng)[0];
            }
            let x = DVector::from_fn(self.dim(), |d, _| {
                self.means[s][d] + self.variances[s][d].sqrt() * S::standard_normal(rng)
            });
            states.push(s);
            obs.push(x);
        }
        (states, obs)
    }

    fn check_dims(&self, window: &[DVector<S>]) -> Result<()> {
        match window.iter().find(|x| x.len() != self.dim()) {
            Some(x) => Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            }),
            None => Ok(()),
        }
    }
}

/// Emission likelihoods of one frame, rescaled by their maximum. Returns the
/// log of the scale.
fn scaled_emissions<S: Scalar>(hmm: &GaussianHmm<S>, x: &DVector<S>, out: &mut [S]) -> S {
    for (s, o) in out.iter_mut().enumerate() {
        *o = hmm.log_emission(s, x);
    }
    let m = out
        .iter()
        .copied()
        .fold(S::lit(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
    for o in out.iter_mut() {
        *o = (*o - m).exp();
    }
    m
}

/// Exact log-likelihood of `window` by the scaled forward recursion.
pub fn hmm_forward_loglik<S: Scalar>(hmm: &GaussianHmm<S>, window: &[DVector<S>]) -> Result<S> {
    if window.is_empty() {
        return Err(Error::InvalidInput("empty observation window".into()));
    }
    hmm.check_dims(window)?;
    let n = hmm.n_states();
    let mut alpha = hmm.initial.clone();
    let mut next = vec![S::zero(); n];
    let mut emis = vec![S::zero(); n];
    let mut total = S::zero();
    for (t, x) in window.iter().enumerate() {
        let shift = scaled_emissions(hmm, x, &mut emis);
        if t == 0 {
            next.copy_from_slice(&hmm.initial);
        } else {
            for (j, nj) in next.iter_mut().enumerate() {
                *nj = (0..n).fold(S::zero(), |a, i| a + alpha[i] * hmm.transition[(i, j)]);
            }
        }
        let mut c = S::zero();
        for (nj, &e) in next.iter_mut().zip(&emis) {
            *nj *= e;
            c += *nj;
        }
        if !(c > S::zero()) {
            return Ok(S::lit(f64::NEG_INFINITY));
        }
        for (a, &nj) in alpha.iter_mut().zip(&next) {
            *a = nj / c;
        }
        total += c.ln() + shift;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaumWelchConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for BaumWelchConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaumWelchFit<S: Scalar> {
    pub hmm: GaussianHmm<S>,
    /// Total log-likelihood of the parameters entering each iteration.
    pub trace: Vec<S>,
}

pub fn hmm_fit_baum_welch<S: Scalar>(
    sequences: &[Vec<DVector<S>>],
    n_states: usize,
    cfg: &BaumWelchConfig,
) -> Result<GaussianHmm<S>> {
    hmm_fit_baum_welch_traced(sequences, n_states, cfg).map(|f| f.hmm)
}

/// Baum–Welch over several sequences; best of `cfg.restarts` random starts by
/// final training log-likelihood.
pub fn hmm_fit_baum_welch_traced<S: Scalar>(
    sequences: &[Vec<DVector<S>>],
    n_states: usize,
    cfg: &BaumWelchConfig,
) -> Result<BaumWelchFit<S>> {
    if n_states == 0 {
        return Err(Error::InvalidInput("n_states must be at least 1".into()));
    }
    let frames: Vec<&DVector<S>> = sequences.iter().flatten().collect();
    if sequences.is_empty() || frames.len() < 10 * n_states {
        return Err(Error::InvalidInput(format!(
            "{} frames are too few for {} hidden states",
            frames.len(),
            n_states
        )));
    }
    let dim = frames[0].len();
    if let Some(x) = frames.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: x.len(),
        });
    }
    if frames.iter().any(|x| x.iter().any(|v| !v.is_finite_value())) {
        return Err(Error::InvalidInput("non-finite observation".into()));
    }
    if frames.iter().all(|x| *x == frames[0]) {
        log::warn!("all {} training frames are identical", frames.len());
        return Err(Error::DegenerateData("all training frames are identical".into()));
    }
    let owned: Vec<DVector<S>> = frames.into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<BaumWelchFit<S>> = None;
    for _ in 0..cfg.restarts.max(1) {
        let mut run_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let init = random_init(&owned, n_states, &mut run_rng);
        let fit = baum_welch_run(sequences, init, cfg)?;
        if best.as_ref().is_none_or(|b| fit.trace.last() > b.trace.last()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn random_init<S: Scalar, R: Rng + ?Sized>(frames: &[DVector<S>], n: usize, rng: &mut R) -> GaussianHmm<S> {
    let dim = frames[0].len();
    let labels = kmeans(frames, n, rng);
    let count = S::of_count(frames.len());
    let global_mean = frames.iter().fold(DVector::zeros(dim), |a, x| a + x) / count;
    let global_var = frames
        .iter()
        .fold(DVector::zeros(dim), |a, x| a + (x - &global_mean).map(|d| d * d))
        / count;
    let floor = S::lit(VARIANCE_FLOOR);
    let mut means = Vec::with_capacity(n);
    let mut variances = Vec::with_capacity(n);
    for s in 0..n {
        let members: Vec<&DVector<S>> = frames.iter().zip(&labels).filter(|(_, &l)| l == s).map(|(x, _)| x).collect();
        if members.len() < 2 {
            means.push(members.first().map(|x| (*x).clone()).unwrap_or_else(|| global_mean.clone()));
            variances.push(global_var.map(|v| v.max(floor)));
            continue;
        }
        let c = S::of_count(members.len());
        let mean = members.iter().fold(DVector::zeros(dim), |a, x| a + *x) / c;
        let var = members.iter().fold(DVector::zeros(dim), |a, x| a + (*x - &mean).map(|d| d * d)) / c;
        means.push(mean);
        variances.push(var.map(|v| v.max(floor)));
    }
    let transition = DMatrix::from_fn(n, n, |i, j| {
        let u = S::lit(rng.random::<f64>());
        if i == j {
            S::lit(n as f64) + u
        } else {
            u
        }
    });
    let mut transition = transition;
    for mut row in transition.row_iter_mut() {
        let total = row.sum();
        row /= total;
    }
    GaussianHmm {
        initial: vec![S::one() / S::of_count(n); n],
        transition,
        means,
        variances,
    }
}

struct Accumulators<S: Scalar> {
    initial: Vec<S>,
    transitions: DMatrix<S>,
    occupancy: Vec<S>,
    sums: Vec<DVector<S>>,
    squares: Vec<DVector<S>>,
    loglik: S,
}

fn accumulate<S: Scalar>(hmm: &GaussianHmm<S>, seq: &[DVector<S>], acc: &mut Accumulators<S>) {
    let n = hmm.n_states();
    let len = seq.len();
    if len == 0 {
        return;
    }
    let mut emis = vec![vec![S::zero(); n]; len];
    let mut alpha = vec![vec![S::zero(); n]; len];
    let mut scale = vec![S::zero(); len];
    for t in 0..len {
        let shift = scaled_emissions(hmm, &seq[t], &mut emis[t]);
        for j in 0..n {
            let prior = if t == 0 {
                hmm.initial[j]
            } else {
                (0..n).fold(S::zero(), |a, i| a + alpha[t - 1][i] * hmm.transition[(i, j)])
            };
            alpha[t][j] = prior * emis[t][j];
        }
        let c = alpha[t].iter().fold(S::zero(), |a, &v| a + v);
        scale[t] = c;
        for v in &mut alpha[t] {
            *v /= c;
        }
        acc.loglik += c.ln() + shift;
    }
    let mut beta = vec![S::one(); n];
    for t in (0..len).rev() {
        for i in 0..n {
            let g = alpha[t][i] * beta[i];
            acc.occupancy[i] += g;
            acc.sums[i].axpy(g, &seq[t], S::one());
            acc.squares[i].axpy(g, &seq[t].map(|v| v * v), S::one());
            if t == 0 {
                acc.initial[i] += g;
            }
        }
        if t == 0 {
            break;
        }
        let weighted: Vec<S> = (0..n).map(|j| emis[t][j] * beta[j] / scale[t]).collect();
        for i in 0..n {
            for j in 0..n {
                acc.transitions[(i, j)] += alpha[t - 1][i] * hmm.transition[(i, j)] * weighted[j];
            }
        }
        beta = (0..n)
            .map(|i| (0..n).fold(S::zero(), |a, j| a + hmm.transition[(i, j)] * weighted[j]))
            .collect();
    }
}

fn baum_welch_run<S: Scalar>(
    sequences: &[Vec<DVector<S>>],
    mut hmm: GaussianHmm<S>,
    cfg: &BaumWelchConfig,
) -> Result<BaumWelchFit<S>> {
    let n = hmm.n_states();
    let dim = hmm.dim();
    let floor = S::lit(VARIANCE_FLOOR);
    let mut trace: Vec<S> = Vec::new();
    for iter in 0..=cfg.max_iters {
        let mut acc = Accumulators {
            initial: vec![S::zero(); n],
            transitions: DMatrix::zeros(n, n),
            occupancy: vec![S::zero(); n],
            sums: vec![DVector::zeros(dim); n],
            squares: vec![DVector::zeros(dim); n],
            loglik: S::zero(),
        };
        for seq in sequences {
            accumulate(&hmm, seq, &mut acc);
        }
        let converged = trace
            .last()
            .is_some_and(|&prev| (acc.loglik - prev).abs() <= S::lit(cfg.tol) * prev.abs());
        trace.push(acc.loglik);
        if converged || iter == cfg.max_iters {
            break;
        }
        let init_total = acc.initial.iter().fold(S::zero(), |a, &v| a + v);
        let mut next = hmm.clone();
        next.initial = acc.initial.iter().map(|&v| v / init_total).collect();
        for i in 0..n {
            let row_total = acc.transitions.row(i).sum();
            if row_total > S::zero() {
                for j in 0..n {
                    next.transition[(i, j)] = acc.transitions[(i, j)] / row_total;
                }
            }
            let occ = acc.occupancy[i];
            if occ > S::lit(1e-300) {
                let mean = &acc.sums[i] / occ;
                let var = (&acc.squares[i] / occ - mean.map(|m| m * m)).map(|v| v.max(floor));
                next.means[i] = mean;
                next.variances[i] = var;
            }
        }
        hmm = next;
    }
    Ok(BaumWelchFit { hmm, trace })
}

/// Numerically stable softmax; a non-finite normalizer yields the uniform vector.
pub fn softmax<S: Scalar>(scores: &DVector<S>) -> DVector<S> {
    let values: Vec<S> = scores.iter().copied().collect();
    let norm = log_sum_exp(&values);
    if !norm.is_finite_value() {
        return DVector::from_element(scores.len(), S::one() / S::of_count(scores.len()));
    }
    scores.map(|v| (v - norm).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn random_hmm(n: usize, seed: u64) -> GaussianHmm<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = |k: usize| {
            let v: Vec<f64> = (0..k).map(|_| rand::Rng::random::<f64>(&mut rng) + 0.05).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let initial = row(n);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| row(n)).collect();
        let transition = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        let means = (0..n).map(|s| dvector![s as f64 * 1.5 - 1.0, 0.5 - s as f64]).collect();
        let variances = (0..n).map(|s| dvector![0.5 + 0.3 * s as f64, 1.0]).collect();
        GaussianHmm::new(initial, transition, means, variances).unwrap()
    }

    /// Sums the joint probability of every hidden path.
    fn enumerate_paths(hmm: &GaussianHmm<f64>, window: &[DVector<f64>]) -> f64 {
        let n = hmm.n_states();
        let len = window.len();
        let mut total = 0.0;
        for code in 0..n.pow(len as u32) {
            let mut path = Vec::with_capacity(len);
            let mut c = code;
            for _ in 0..len {
                path.push(c % n);
                c /= n;
            }
            let mut p = hmm.initial[path[0]] * hmm.log_emission(path[0], &window[0]).exp();
            for t in 1..len {
                p *= hmm.transition[(path[t - 1], path[t])] * hmm.log_emission(path[t], &window[t]).exp();
            }
            total += p;
        }
        total.ln()
    }

    #[test]
    fn one_state_closed_form() {
        let hmm = GaussianHmm::new(vec![1.0], dmatrix![1.0], vec![dvector![0.0]], vec![dvector![1.0]]).unwrap();
        let ll = hmm_forward_loglik(&hmm, &[dvector![0.0], dvector![0.0]]).unwrap();
        assert!((ll + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn base_case_is_mixture_density() {
        let hmm = random_hmm(3, 1);
        let x = dvector![0.3, -0.2];
        let expected = (0..3)
            .map(|s| hmm.initial[s] * hmm.log_emission(s, &x).exp())
            .sum::<f64>()
            .ln();
        assert_relative_eq!(hmm_forward_loglik(&hmm, &[x]).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn forward_matches_path_enumeration() {
        let hmm = random_hmm(3, 2);
        let (_, window) = hmm.sample(6, &mut ChaCha8Rng::seed_from_u64(3));
        assert_relative_eq!(
            hmm_forward_loglik(&hmm, &window).unwrap(),
            enumerate_paths(&hmm, &window),
            max_relative = 1e-10
        );
    }

    #[test]
    fn forward_survives_extreme_observations() {
        let hmm = random_hmm(2, 4);
        let window = vec![dvector![400.0, -300.0]; 50];
        assert!(hmm_forward_loglik(&hmm, &window).unwrap().is_finite());
    }

    #[test]
    fn dimension_mismatch_detected() {
        let hmm = random_hmm(2, 5);
        assert!(matches!(
            hmm_forward_loglik(&hmm, &[dvector![1.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn one_state_fit_is_sample_moments() {
        let hmm = random_hmm(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seqs: Vec<Vec<DVector<f64>>> = (0..3).map(|_| hmm.sample(40, &mut rng).1).collect();
        let fit = hmm_fit_baum_welch(&seqs, 1, &BaumWelchConfig::default()).unwrap();
        let frames: Vec<&DVector<f64>> = seqs.iter().flatten().collect();
        let n = frames.len() as f64;
        let mean = frames.iter().fold(DVector::zeros(2), |a, x| a + *x) / n;
        let var = frames.iter().fold(DVector::zeros(2), |a, x| a + (*x - &mean).map(|d| d * d)) / n;
        assert!((&fit.means[0] - mean).amax() < 1e-10);
        assert!((&fit.variances[0] - var).amax() < 1e-10);
    }

    #[test]
    fn recovers_separated_states() {
        let truth = GaussianHmm::new(
            vec![0.5, 0.5],
            dmatrix![0.9, 0.1; 0.2, 0.8],
            vec![dvector![0.0], dvector![10.0]],
            vec![dvector![1.0], dvector![1.0]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seqs: Vec<Vec<DVector<f64>>> = (0..10).map(|_| truth.sample(100, &mut rng).1).collect();
        let fit = hmm_fit_baum_welch(&seqs, 2, &BaumWelchConfig::default()).unwrap();
        let mut means: Vec<f64> = fit.means.iter().map(|m| m[0]).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(means[0].abs() < 0.2 && (means[1] - 10.0).abs() < 0.2, "{means:?}");
    }

    #[test]
    fn constant_frames_are_degenerate() {
        let seqs = vec![vec![dvector![1.0, 1.0]; 30]];
        assert!(matches!(
            hmm_fit_baum_welch(&seqs, 2, &BaumWelchConfig::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let p = softmax(&dvector![0.0, 0.0, 0.0]);
        assert!((p - DVector::from_element(3, 1.0 / 3.0)).amax() < 1e-15);
        let a = softmax(&dvector![1.0, -2.0, 0.5]);
        let b = softmax(&dvector![101.0, 98.0, 100.5]);
        assert!((a - b).amax() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn forward_equals_enumeration(n in 1usize..=3, len in 1usize..=7, seed in 0u64..1000) {
            let hmm = random_hmm(n, seed);
            let (_, window) = hmm.sample(len, &mut ChaCha8Rng::seed_from_u64(seed + 1));
            let a = hmm_forward_loglik(&hmm, &window).unwrap();
            let b = enumerate_paths(&hmm, &window);
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300));
        }

        #[test]
        fn baum_welch_trace_monotone(seed in 0u64..1000, n in 1usize..=3) {
            let truth = random_hmm(3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let seqs: Vec<Vec<DVector<f64>>> = (0..4).map(|_| truth.sample(30, &mut rng).1).collect();
            let cfg = BaumWelchConfig { seed, restarts: 1, ..BaumWelchConfig::default() };
            let fit = hmm_fit_baum_welch_traced(&seqs, n, &cfg).unwrap();
            for w in fit.trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
            }
        }
    }
}
