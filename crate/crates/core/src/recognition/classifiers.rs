//! Baseline probabilistic classifiers: one HMM per class over whole
//! sequences, and Gaussian naive Bayes / LDA / QDA over flattened windows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::hmm::{hmm_fit_baum_welch, hmm_forward_loglik, softmax, BaumWelchConfig, GaussianHmm};
use crate::error::{Error, Result};
use crate::linalg::Gaussian;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    FlatHmm,
    Gnb,
    Lda,
    Qda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", bound = "")]
pub enum ClassifierModel<S: Scalar> {
    FlatHmm {
        models: Vec<GaussianHmm<S>>,
        priors: Vec<S>,
    },
    Gnb {
        means: Vec<DVector<S>>,
        variances: Vec<DVector<S>>,
        priors: Vec<S>,
    },
    Lda {
        means: Vec<DVector<S>>,
        covariance: DMatrix<S>,
        priors: Vec<S>,
    },
    Qda {
        means: Vec<DVector<S>>,
        covariances: Vec<DMatrix<S>>,
        priors: Vec<S>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Class priors; uniform when absent.
    pub priors: Option<Vec<f64>>,
    pub hmm_states: usize,
    pub baum_welch: BaumWelchConfig,
    pub jitter: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            priors: None,
            hmm_states: 3,
            baum_welch: BaumWelchConfig::default(),
            jitter: 1e-6,
        }
    }
}

impl<S: Scalar> ClassifierModel<S> {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Self::FlatHmm { .. } => ClassifierKind::FlatHmm,
            Self::Gnb { .. } => ClassifierKind::Gnb,
            Self::Lda { .. } => ClassifierKind::Lda,
            Self::Qda { .. } => ClassifierKind::Qda,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Self::FlatHmm { priors, .. }
            | Self::Gnb { priors, .. }
            | Self::Lda { priors, .. }
            | Self::Qda { priors, .. } => priors.len(),
        }
    }
}

fn flatten<S: Scalar>(window: &[DVector<S>]) -> DVector<S> {
    DVector::from_iterator(
        window.iter().map(|x| x.len()).sum(),
        window.iter().flat_map(|x| x.iter().copied()),
    )
}

fn mean_of<S: Scalar>(xs: &[&DVector<S>]) -> DVector<S> {
    xs.iter().fold(DVector::zeros(xs[0].len()), |a, x| a + *x) / S::of_count(xs.len())
}

fn scatter<S: Scalar>(xs: &[&DVector<S>], mean: &DVector<S>) -> DMatrix<S> {
    let mut out = DMatrix::zeros(mean.len(), mean.len());
    for x in xs {
        let d = *x - mean;
        out.ger(S::one(), &d, &d, S::one());
    }
    out
}

fn with_jitter<S: Scalar>(mut m: DMatrix<S>, jitter: S) -> DMatrix<S> {
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    m
}

/// Fits a classifier; `labels[i]` is the class index of `windows[i]`.
pub fn classifier_fit<S: Scalar>(
    kind: ClassifierKind,
    windows: &[Vec<DVector<S>>],
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<ClassifierModel<S>> {
    if windows.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: windows.len(),
            right: labels.len(),
        });
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        return Err(Error::InvalidInput("need at least two classes".into()));
    }
    let by_class: Vec<Vec<usize>> = (0..n_classes)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    if by_class.iter().any(|idx| idx.len() < 2) {
        return Err(Error::InvalidInput("need at least two samples per class".into()));
    }
    let priors: Vec<S> = match &cfg.priors {
        Some(p) if p.len() != n_classes => {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: n_classes,
            })
        }
        Some(p) => {
            let total: f64 = p.iter().sum();
            p.iter().map(|&v| S::lit(v / total)).collect()
        }
        None => vec![S::one() / S::of_count(n_classes); n_classes],
    };
    let jitter = S::lit(cfg.jitter);

    if kind == ClassifierKind::FlatHmm {
        let models = by_class
            .iter()
            .enumerate()
            .map(|(c, idx)| {
                let seqs: Vec<Vec<DVector<S>>> = idx.iter().map(|&i| windows[i].clone()).collect();
                let bw = BaumWelchConfig {
                    seed: cfg.baum_welch.seed.wrapping_add(c as u64),
                    ..cfg.baum_welch
                };
                hmm_fit_baum_welch(&seqs, cfg.hmm_states, &bw).map_err(|e| e.context(format!("class {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(ClassifierModel::FlatHmm { models, priors });
    }

    let flat: Vec<DVector<S>> = windows.iter().map(|w| flatten(w)).collect();
    let dim = flat[0].len();
    if let Some(x) = flat.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: x.len(),
        });
    }
    let members: Vec<Vec<&DVector<S>>> = by_class
        .iter()
        .map(|idx| idx.iter().map(|&i| &flat[i]).collect())
        .collect();
    let means: Vec<DVector<S>> = members.iter().map(|m| mean_of(m)).collect();
    Ok(match kind {
        ClassifierKind::Gnb => {
            let variances = members
                .iter()
                .zip(&means)
                .map(|(m, mu)| {
                    let n = S::of_count(m.len());
                    m.iter()
                        .fold(DVector::zeros(dim), |a, x| a + (*x - mu).map(|d| d * d))
                        .map(|v| v / n + jitter)
                })
                .collect();
            ClassifierModel::Gnb {
                means,
                variances,
                priors,
            }
        }
        ClassifierKind::Lda => {
            let pooled = members
                .iter()
                .zip(&means)
                .fold(DMatrix::zeros(dim, dim), |a, (m, mu)| a + scatter(m, mu))
                / S::of_count(flat.len());
            ClassifierModel::Lda {
                means,
                covariance: with_jitter(pooled, jitter),
                priors,
            }
        }
        ClassifierKind::Qda => {
            let covariances = members
                .iter()
                .zip(&means)
                .map(|(m, mu)| with_jitter(scatter(m, mu) / S::of_count(m.len()), jitter))
                .collect();
            ClassifierModel::Qda {
                means,
                covariances,
                priors,
            }
        }
        ClassifierKind::FlatHmm => unreachable!(),
    })
}

/// Posterior class probabilities for one window via Bayes' rule.
pub fn classifier_predict<S: Scalar>(model: &ClassifierModel<S>, window: &[DVector<S>]) -> Result<DVector<S>> {
    let tiny = S::lit(1e-12);
    let scores: Vec<S> = match model {
        ClassifierModel::FlatHmm { models, priors } => models
            .iter()
            .zip(priors)
            .map(|(m, p)| Ok(p.ln() + hmm_forward_loglik(m, window)?))
            .collect::<Result<_>>()?,
        ClassifierModel::Gnb {
            means,
            variances,
            priors,
        } => {
            let x = flatten(window);
            check_dim(&x, means[0].len())?;
            means
                .iter()
                .zip(variances)
                .zip(priors)
                .map(|((mu, var), p)| {
                    let ll = mu.iter().zip(var.iter()).zip(x.iter()).fold(S::zero(), |a, ((&m, &v), &xi)| {
                        a - S::lit(0.5) * ((S::two_pi() * v).ln() + (xi - m) * (xi - m) / v)
                    });
                    p.ln() + ll
                })
                .collect()
        }
        ClassifierModel::Lda {
            means,
            covariance,
            priors,
        } => {
            let x = flatten(window);
            check_dim(&x, means[0].len())?;
            means
                .iter()
                .zip(priors)
                .map(|(mu, p)| Ok(p.ln() + Gaussian::new(mu.clone(), covariance, tiny)?.log_pdf(&x)))
                .collect::<Result<_>>()?
        }
        ClassifierModel::Qda {
            means,
            covariances,
            priors,
        } => {
            let x = flatten(window);
            check_dim(&x, means[0].len())?;
            means
                .iter()
                .zip(covariances)
                .zip(priors)
                .map(|((mu, cov), p)| Ok(p.ln() + Gaussian::new(mu.clone(), cov, tiny)?.log_pdf(&x)))
                .collect::<Result<_>>()?
        }
    };
    Ok(softmax(&DVector::from_vec(scores)))
}

fn check_dim<S: Scalar>(x: &DVector<S>, expected: usize) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: x.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn one_d(seed: u64, centers: &[f64], per: usize) -> (Vec<Vec<DVector<f64>>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut windows = Vec::new();
        let mut labels = Vec::new();
        for (c, &mu) in centers.iter().enumerate() {
            for _ in 0..per {
                windows.push(vec![dvector![mu + n.sample(&mut rng)]]);
                labels.push(c);
            }
        }
        (windows, labels)
    }

    #[test]
    fn gnb_separated_classes() {
        let (w, l) = one_d(1, &[0.0, 10.0], 100);
        let m = classifier_fit(ClassifierKind::Gnb, &w, &l, &ClassifierConfig::default()).unwrap();
        let p = classifier_predict(&m, &[dvector![0.0]]).unwrap();
        assert!(p[0] > 0.99);
        // Closed-form Bayes posterior with the fitted parameters.
        if let ClassifierModel::Gnb { means, variances, .. } = &m {
            let dens = |c: usize| {
                let v = variances[c][0];
                (-(0.0 - means[c][0]).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            };
            let expected = dens(0) / (dens(0) + dens(1));
            assert!((p[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lda_identical_classes_is_even() {
        let (w, _) = one_d(2, &[0.0], 40);
        let mut windows = w.clone();
        windows.extend(w);
        let labels: Vec<usize> = (0..80).map(|i| i / 40).collect();
        let m = classifier_fit(ClassifierKind::Lda, &windows, &labels, &ClassifierConfig::default()).unwrap();
        for q in [-3.0, 0.0, 2.5] {
            let p = classifier_predict(&m, &[dvector![q]]).unwrap();
            assert!((p[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn qda_agrees_with_lda_on_equal_isotropic_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut windows = Vec::new();
        let mut labels = Vec::new();
        for (c, mu) in [(0usize, [0.0, 0.0]), (1, [4.0, 1.0]), (2, [-2.0, 3.0])] {
            for _ in 0..400 {
                windows.push(vec![dvector![mu[0] + n.sample(&mut rng), mu[1] + n.sample(&mut rng)]]);
                labels.push(c);
            }
        }
        let cfg = ClassifierConfig::default();
        let lda = classifier_fit(ClassifierKind::Lda, &windows, &labels, &cfg).unwrap();
        let qda = classifier_fit(ClassifierKind::Qda, &windows, &labels, &cfg).unwrap();
        let mut agree = 0;
        let total = 200;
        for i in 0..total {
            let q = vec![dvector![-4.0 + 0.05 * i as f64, 4.0 - 0.03 * i as f64]];
            let a = classifier_predict(&lda, &q).unwrap().argmax().0;
            let b = classifier_predict(&qda, &q).unwrap().argmax().0;
            agree += usize::from(a == b);
        }
        assert!(agree >= total * 95 / 100, "{agree}/{total}");
    }

    #[test]
    fn flat_hmm_prefers_matching_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut windows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..6 {
                let level = if c == 0 { -2.0 } else { 2.0 };
                windows.push((0..20).map(|_| dvector![level + n.sample(&mut rng)]).collect());
                labels.push(c);
            }
        }
        let cfg = ClassifierConfig { hmm_states: 1, ..ClassifierConfig::default() };
        let m = classifier_fit(ClassifierKind::FlatHmm, &windows, &labels, &cfg).unwrap();
        let p = classifier_predict(&m, &windows[8]).unwrap();
        assert!(p[1] > 0.99);
        assert_eq!(m.kind(), ClassifierKind::FlatHmm);
    }

    #[test]
    fn rejects_single_class_and_tiny_classes() {
        let (w, l) = one_d(5, &[0.0], 10);
        assert!(classifier_fit(ClassifierKind::Gnb, &w, &l, &ClassifierConfig::default()).is_err());
        let (w, mut l) = one_d(5, &[0.0, 1.0], 3);
        l[3] = 0;
        l[4] = 0;
        assert!(classifier_fit(ClassifierKind::Lda, &w, &l, &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn probabilities_are_normalized() {
        let (w, l) = one_d(6, &[0.0, 1.0, 5.0], 30);
        let cfg = ClassifierConfig::default();
        for kind in [ClassifierKind::Gnb, ClassifierKind::Lda, ClassifierKind::Qda] {
            let m = classifier_fit(kind, &w, &l, &cfg).unwrap();
            for q in [-10.0, 0.3, 2.0, 40.0] {
                let p = classifier_predict(&m, &[dvector![q]]).unwrap();
                assert!((p.sum() - 1.0).abs() < 1e-9 && p.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
