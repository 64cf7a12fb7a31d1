//! Full-covariance Gaussian mixtures fitted by EM with k-means seeding.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::systematic_resample;
use crate::error::{Error, Result};
use crate::linalg::{euclidean_sq, symmetrize, Gaussian};
use crate::scalar::{log_sum_exp, Scalar};

/// Component weight below which a fitted component is treated as empty.
const EMPTY_COMPONENT_MASS: f64 = 1e-8;
const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Gmm<S: Scalar> {
    pub weights: Vec<S>,
    pub means: Vec<DVector<S>>,
    pub covariances: Vec<DMatrix<S>>,
}

impl<S: Scalar> Gmm<S> {
    pub fn new(weights: Vec<S>, means: Vec<DVector<S>>, covariances: Vec<DMatrix<S>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        if means.len() != weights.len() || covariances.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: weights.len(),
                right: means.len().min(covariances.len()),
            });
        }
        let dim = means[0].len();
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != dim || c.nrows() != dim || c.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: if m.len() != dim { m.len() } else { c.nrows() },
                });
            }
        }
        let total = weights.iter().fold(S::zero(), |a, &w| a + w);
        if weights.iter().any(|&w| w < S::zero()) || (total - S::one()).abs() > S::lit(1e-9) {
            return Err(Error::InvalidInput("mixture weights must be nonnegative and sum to 1".into()));
        }
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Free parameters: weights, means and symmetric covariances.
    pub fn parameter_count(&self) -> usize {
        let (n, d) = (self.n_components(), self.dim());
        (n - 1) + n * d + n * d * (d + 1) / 2
    }

    pub fn densities(&self, jitter: S) -> Result<Vec<Gaussian<S>>> {
        self.means
            .iter()
            .zip(&self.covariances)
            .map(|(m, c)| Gaussian::new(m.clone(), c, jitter))
            .collect()
    }

    /// Total log-likelihood of `data`.
    pub fn log_likelihood(&self, data: &[DVector<S>]) -> Result<S> {
        let densities = self.densities(S::lit(1e-12))?;
        let log_w: Vec<S> = self.weights.iter().map(|w| w.ln()).collect();
        let mut buf = vec![S::zero(); self.n_components()];
        Ok(data.iter().fold(S::zero(), |acc, x| {
            for (b, (g, lw)) in buf.iter_mut().zip(densities.iter().zip(&log_w)) {
                *b = *lw + g.log_pdf(x);
            }
            acc + log_sum_exp(&buf)
        }))
    }

    /// Overall mixture mean.
    pub fn mean(&self) -> DVector<S> {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(DVector::zeros(self.dim()), |acc, (&w, m)| acc + m * w)
    }

    /// Overall mixture covariance (law of total variance).
    pub fn covariance(&self) -> DMatrix<S> {
        let mu = self.mean();
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for ((&w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let d = m - &mu;
            out += (c + &d * d.transpose()) * w;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
    /// Added to every covariance diagonal.
    pub jitter: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-6,
            seed: 0,
            restarts: 5,
            jitter: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit<S: Scalar> {
    pub gmm: Gmm<S>,
    /// Log-likelihood of the parameters entering each iteration.
    pub trace: Vec<S>,
    /// Iterations after which a starved component was reseeded. The step
    /// across a reseed is not an EM step and carries no monotonicity promise.
    pub reseeds: Vec<usize>,
}

/// EM for a full-covariance mixture; best of `cfg.restarts` k-means seeded runs.
pub fn gmm_fit_em<S: Scalar>(data: &[DVector<S>], n_components: usize, cfg: &EmConfig) -> Result<Gmm<S>> {
    gmm_fit_em_traced(data, n_components, cfg).map(|f| f.gmm)
}

pub fn gmm_fit_em_traced<S: Scalar>(
    data: &[DVector<S>],
    n_components: usize,
    cfg: &EmConfig,
) -> Result<EmFit<S>> {
    check_data(data, n_components)?;
    if is_constant(data) {
        log::warn!("all {} samples are identical; covariances fall back to the jitter floor", data.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<EmFit<S>> = None;
    for _ in 0..cfg.restarts.max(1) {
        let mut run_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let fit = em_run(data, n_components, cfg, &mut run_rng)?;
        let better = match &best {
            None => true,
            Some(b) => fit.trace.last() > b.trace.last(),
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn check_data<S: Scalar>(data: &[DVector<S>], n_components: usize) -> Result<()> {
    if n_components == 0 {
        return Err(Error::InvalidInput("n_components must be at least 1".into()));
    }
    if data.len() < 10 * n_components {
        return Err(Error::InvalidInput(format!(
            "{} samples are too few for {} components",
            data.len(),
            n_components
        )));
    }
    let dim = data[0].len();
    for x in data {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite_value()) {
            return Err(Error::InvalidInput("non-finite sample".into()));
        }
    }
    Ok(())
}

fn is_constant<S: Scalar>(data: &[DVector<S>]) -> bool {
    data.iter().all(|x| *x == data[0])
}

fn sample_covariance<S: Scalar>(data: &[DVector<S>], jitter: S) -> DMatrix<S> {
    let n = S::of_count(data.len());
    let mean = data.iter().fold(DVector::zeros(data[0].len()), |a, x| a + x) / n;
    let mut cov = DMatrix::zeros(mean.len(), mean.len());
    for x in data {
        let d = x - &mean;
        cov.ger(S::one(), &d, &d, S::one());
    }
    cov /= n;
    add_diagonal(&mut cov, jitter);
    cov
}

fn add_diagonal<S: Scalar>(m: &mut DMatrix<S>, v: S) {
    for i in 0..m.nrows() {
        m[(i, i)] += v;
    }
}

/// k-means++ seeding followed by Lloyd iterations; returns cluster labels.
pub(crate) fn kmeans<S: Scalar, R: Rng + ?Sized>(data: &[DVector<S>], k: usize, rng: &mut R) -> Vec<usize> {
    let mut centers: Vec<DVector<S>> = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<S> = data.iter().map(|x| euclidean_sq(x, &centers[0])).collect();
    while centers.len() < k {
        let total = d2.iter().fold(S::zero(), |a, &d| a + d);
        let idx = if total > S::zero() {
            let probs: Vec<S> = d2.iter().map(|&d| d / total).collect();
            systematic_resample(&probs, 1, rng)[0]
        } else {
            rng.random_range(0..data.len())
        };
        centers.push(data[idx].clone());
        for (d, x) in d2.iter_mut().zip(data) {
            let nd = euclidean_sq(x, &centers[centers.len() - 1]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    let nearest = |x: &DVector<S>, centers: &[DVector<S>]| {
        let mut best = (0, S::lit(f64::INFINITY));
        for (j, c) in centers.iter().enumerate() {
            let d = euclidean_sq(x, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    };
    let mut labels: Vec<usize> = data.iter().map(|x| nearest(x, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![DVector::zeros(data[0].len()); k];
        let mut counts = vec![0usize; k];
        for (x, &l) in data.iter().zip(&labels) {
            sums[l] += x;
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = &sums[j] / S::of_count(counts[j]);
            }
        }
        let next: Vec<usize> = data.iter().map(|x| nearest(x, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

fn initial_mixture<S: Scalar, R: Rng + ?Sized>(
    data: &[DVector<S>],
    k: usize,
    jitter: S,
    rng: &mut R,
) -> Gmm<S> {
    let labels = kmeans(data, k, rng);
    let global = sample_covariance(data, jitter);
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for j in 0..k {
        let members: Vec<DVector<S>> = data
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == j)
            .map(|(x, _)| x.clone())
            .collect();
        if members.len() < 2 {
            weights.push(S::one());
            means.push(members.first().cloned().unwrap_or_else(|| data[rng.random_range(0..data.len())].clone()));
            covariances.push(global.clone());
        } else {
            weights.push(S::of_count(members.len()));
            means.push(members.iter().fold(DVector::zeros(data[0].len()), |a, x| a + x) / S::of_count(members.len()));
            covariances.push(sample_covariance(&members, jitter));
        }
    }
    let total = weights.iter().fold(S::zero(), |a, &w| a + w);
    for w in &mut weights {
        *w /= total;
    }
    Gmm {
        weights,
        means,
        covariances,
    }
}

/// Log responsibilities (row per sample) and total log-likelihood.
fn e_step<S: Scalar>(data: &[DVector<S>], gmm: &Gmm<S>, jitter: S) -> Result<(Vec<Vec<S>>, S)> {
    let densities = gmm.densities(jitter)?;
    let log_w: Vec<S> = gmm.weights.iter().map(|w| w.ln()).collect();
    let mut total = S::zero();
    let mut resp = Vec::with_capacity(data.len());
    for x in data {
        let mut row: Vec<S> = densities
            .iter()
            .zip(&log_w)
            .map(|(g, &lw)| lw + g.log_pdf(x))
            .collect();
        let norm = log_sum_exp(&row);
        total += norm;
        for r in &mut row {
            *r = (*r - norm).exp();
        }
        resp.push(row);
    }
    Ok((resp, total))
}

fn em_run<S: Scalar, R: Rng + ?Sized>(
    data: &[DVector<S>],
    k: usize,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<EmFit<S>> {
    let jitter = S::lit(cfg.jitter);
    let n = S::of_count(data.len());
    let dim = data[0].len();
    let mut gmm = initial_mixture(data, k, jitter, rng);
    let mut trace = Vec::new();
    let mut reseeds = Vec::new();
    let mut reseeded = vec![false; k];
    for iter in 0..=cfg.max_iters {
        let (resp, ll) = e_step(data, &gmm, S::lit(1e-12))?;
        let converged = trace
            .last()
            .is_some_and(|&prev: &S| (ll - prev).abs() <= S::lit(cfg.tol) * prev.abs());
        trace.push(ll);
        if converged || iter == cfg.max_iters {
            break;
        }
        let mut next = gmm.clone();
        let mut reseed_now = false;
        for j in 0..k {
            let nj = resp.iter().fold(S::zero(), |a, r| a + r[j]);
            if nj < S::lit(EMPTY_COMPONENT_MASS) * n {
                if !reseeded[j] {
                    reseeded[j] = true;
                    reseed_now = true;
                    next.means[j] = data[rng.random_range(0..data.len())].clone();
                    next.covariances[j] = sample_covariance(data, jitter);
                    next.weights[j] = S::one() / S::of_count(k);
                } else {
                    next.weights[j] = S::lit(EMPTY_COMPONENT_MASS);
                }
                continue;
            }
            let mean = data
                .iter()
                .zip(&resp)
                .fold(DVector::zeros(dim), |a, (x, r)| a + x * r[j])
                / nj;
            let mut cov = DMatrix::zeros(dim, dim);
            for (x, r) in data.iter().zip(&resp) {
                let d = x - &mean;
                cov.ger(r[j], &d, &d, S::one());
            }
            cov /= nj;
            add_diagonal(&mut cov, jitter);
            next.weights[j] = nj / n;
            next.means[j] = mean;
            next.covariances[j] = symmetrize(&cov);
        }
        let total = next.weights.iter().fold(S::zero(), |a, &w| a + w);
        for w in &mut next.weights {
            *w /= total;
        }
        if reseed_now {
            reseeds.push(iter);
        }
        gmm = next;
    }
    Ok(EmFit { gmm, trace, reseeds })
}

/// `true` when no EM step lowered the log-likelihood by more than `slack`
/// relative to its magnitude.
pub fn trace_is_monotone<S: Scalar>(trace: &[S], skip_after: &[usize], slack: f64) -> bool {
    trace.windows(2).enumerate().all(|(i, w)| {
        skip_after.contains(&i) || w[1] >= w[0] - S::lit(slack) * w[0].abs().max(S::one())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, centers: &[(f64, f64, usize)]) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::new();
        for &(cx, cy, count) in centers {
            for _ in 0..count {
                out.push(DVector::from_vec(vec![cx + n.sample(&mut rng), cy + n.sample(&mut rng)]));
            }
        }
        out
    }

    #[test]
    fn single_component_is_sample_moments() {
        let data = blobs(3, &[(1.0, -2.0, 200)]);
        let gmm = gmm_fit_em(&data, 1, &EmConfig::default()).unwrap();
        let mean = data.iter().fold(DVector::zeros(2), |a, x| a + x) / 200.0;
        let cov = sample_covariance(&data, 1e-6);
        assert!((&gmm.means[0] - mean).amax() < 1e-10);
        assert!((&gmm.covariances[0] - cov).amax() < 1e-10);
        assert_eq!(gmm.weights, vec![1.0]);
    }

    #[test]
    fn separated_clusters_are_recovered() {
        let data = blobs(11, &[(0.0, 0.0, 300), (10.0, 10.0, 100)]);
        let gmm = gmm_fit_em(&data, 2, &EmConfig::default()).unwrap();
        let (lo, hi) = if gmm.means[0][0] < gmm.means[1][0] { (0, 1) } else { (1, 0) };
        assert!(gmm.means[lo].amax() < 0.2);
        assert!((&gmm.means[hi] - DVector::from_element(2, 10.0)).amax() < 0.2);
        assert!((gmm.weights[lo] - 0.75).abs() < 0.05);
    }

    #[test]
    fn trace_never_decreases() {
        for seed in 0..5 {
            let data = blobs(seed, &[(0.0, 0.0, 80), (3.0, 1.0, 80), (-2.0, 4.0, 40)]);
            let fit = gmm_fit_em_traced(&data, 3, &EmConfig { seed, restarts: 2, ..EmConfig::default() }).unwrap();
            assert!(trace_is_monotone(&fit.trace, &fit.reseeds, 1e-8), "seed {seed}: {:?}", fit.trace);
        }
    }

    #[test]
    fn fixed_seed_reproduces() {
        let data = blobs(5, &[(0.0, 0.0, 50), (5.0, 5.0, 50)]);
        let cfg = EmConfig { seed: 9, ..EmConfig::default() };
        assert_eq!(gmm_fit_em(&data, 2, &cfg).unwrap(), gmm_fit_em(&data, 2, &cfg).unwrap());
    }

    #[test]
    fn constant_data_hits_jitter_floor() {
        let data = vec![DVector::from_vec(vec![1.0_f64, 2.0]); 30];
        let gmm = gmm_fit_em(&data, 1, &EmConfig::default()).unwrap();
        assert!((gmm.covariances[0][(0, 0)] - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_rejected() {
        let data = blobs(1, &[(0.0, 0.0, 15)]);
        assert!(gmm_fit_em(&data, 2, &EmConfig::default()).is_err());
    }

    #[test]
    fn mixture_moments() {
        let gmm = Gmm::<f64>::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        assert_eq!(gmm.mean()[0], 0.0);
        assert!((gmm.covariance()[(0, 0)] - 2.0).abs() < 1e-12);
        assert_eq!(gmm.parameter_count(), 1 + 2 + 2);
    }
}
