//! Model training from labeled trajectories.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::synthetic::{BehaviorSpec, LabeledTrajectory, X3_LIMIT};
use crate::error::{Error, Result};
use crate::evolution::{BehaviorEvolution, CgmrModel, EmConfig, StateHistory};
use crate::recognition::{
    classifier_fit, classifier_predict, dhmm_train, ClassifierConfig, ClassifierKind, ClassifierModel,
    DhmmStack, DhmmStream, DhmmTrainingConfig, LabeledSequence,
};

/// Recognition features built from the observed speed `z₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Frames spanned by the finite-difference slope.
    pub lag: usize,
    /// Also emit the raw `z₂` level.
    pub include_level: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            lag: 5,
            include_level: false,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        1 + usize::from(self.include_level)
    }
}

/// Per-frame features `[(z₂ₜ − z₂ₜ₋ₗ)/(l·Δt)]`, optionally preceded by `z₂ₜ`.
/// Early frames use the longest lag available; frame 0 has slope 0.
pub fn recognition_features(observations: &[DVector<f64>], cfg: &FeatureConfig, dt: f64) -> Vec<DVector<f64>> {
    (0..observations.len())
        .map(|t| {
            let back = t.saturating_sub(cfg.lag.max(1));
            let slope = if t == back {
                0.0
            } else {
                (observations[t][1] - observations[back][1]) / ((t - back) as f64 * dt)
            };
            if cfg.include_level {
                DVector::from_vec(vec![observations[t][1], slope])
            } else {
                DVector::from_vec(vec![slope])
            }
        })
        .collect()
}

/// Class indices `(sub-stage, stage, behavior)` of every step.
fn label_tracks(spec: &BehaviorSpec, t: &LabeledTrajectory) -> Result<[Vec<usize>; 3]> {
    let labels = t
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("trajectory {} has no labels", t.id)))?;
    let lookup = |found: Option<usize>, what: &str, id: &str| {
        found.ok_or_else(|| Error::InvalidInput(format!("unknown {what} label {id} in {}", t.id)))
    };
    let mut tracks = [Vec::new(), Vec::new(), Vec::new()];
    for l in labels {
        tracks[0].push(lookup(spec.sub_stage_index(&l.sub_stage), "sub-stage", &l.sub_stage)?);
        tracks[1].push(lookup(spec.stage_index(&l.stage), "stage", &l.stage)?);
        tracks[2].push(lookup(spec.behavior_index(&l.behavior), "behavior", &l.behavior)?);
    }
    Ok(tracks)
}

fn behavior_of(spec: &BehaviorSpec, t: &LabeledTrajectory) -> Result<usize> {
    let id = t
        .behavior()
        .ok_or_else(|| Error::InvalidInput(format!("trajectory {} has no labels", t.id)))?;
    spec.behavior_index(id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown behavior label {id} in {}", t.id)))
}

/// Three-layer stack: sub-stages, then stages, then behaviors.
pub fn train_dhmm(
    spec: &BehaviorSpec,
    train: &[LabeledTrajectory],
    features: &FeatureConfig,
    cfg: &DhmmTrainingConfig,
) -> Result<DhmmStack<f64>> {
    let sequences = train
        .iter()
        .map(|t| {
            let [sub, stage, behavior] = label_tracks(spec, t)?;
            Ok(LabeledSequence {
                features: recognition_features(&t.observations, features, spec.dt),
                labels: vec![sub, stage, behavior],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let counts = [spec.sub_stages.len(), spec.stages.len(), spec.behaviors.len()];
    let labels = spec.behaviors.iter().map(|b| b.id.clone()).collect();
    dhmm_train(&sequences, &counts, labels, cfg).map_err(|e| e.context("training DHMM"))
}

/// Trailing-window training set: every `stride`-th full window, labeled with
/// the trajectory's behavior.
pub fn train_classifier(
    spec: &BehaviorSpec,
    train: &[LabeledTrajectory],
    features: &FeatureConfig,
    kind: ClassifierKind,
    window: usize,
    stride: usize,
    cfg: &ClassifierConfig,
) -> Result<ClassifierModel<f64>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidConfig("classifier window and stride must be positive".into()));
    }
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for t in train {
        let b = behavior_of(spec, t)?;
        let f = recognition_features(&t.observations, features, spec.dt);
        let mut end = window;
        while end <= f.len() {
            windows.push(f[end - window..end].to_vec());
            labels.push(b);
            end += stride;
        }
    }
    classifier_fit(kind, &windows, &labels, cfg).map_err(|e| e.context(format!("training {kind:?}")))
}

/// Either trained recognizer, applied causally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Recognizer {
    Dhmm { stack: DhmmStack<f64> },
    Classifier { model: ClassifierModel<f64>, window: usize },
}

impl Recognizer {
    pub fn n_classes(&self) -> usize {
        match self {
            Recognizer::Dhmm { stack } => stack.n_classes(),
            Recognizer::Classifier { model, .. } => model.n_classes(),
        }
    }

    /// Frames consumed before the first probability vector.
    pub fn latency(&self) -> usize {
        match self {
            Recognizer::Dhmm { stack } => stack.latency() + 1,
            Recognizer::Classifier { window, .. } => *window,
        }
    }

    /// Entry `t` holds the probabilities available once frame `t` is seen,
    /// `None` while the recognizer is still filling up.
    pub fn trace(&self, features: &[DVector<f64>]) -> Result<Vec<Option<DVector<f64>>>> {
        match self {
            Recognizer::Dhmm { stack } => {
                let mut stream = DhmmStream::new(stack);
                features.iter().map(|f| stream.push(f.clone())).collect()
            }
            Recognizer::Classifier { model, window } => (0..features.len())
                .map(|t| {
                    if t + 1 < *window {
                        Ok(None)
                    } else {
                        classifier_predict(model, &features[t + 1 - window..=t]).map(Some)
                    }
                })
                .collect(),
        }
    }
}

/// Settings of the increment regression models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub conditional_components: usize,
    pub pooled_components: usize,
    pub history_depth: usize,
    /// Entries of the augmented state used as regression input.
    pub input_dims: Vec<usize>,
    pub em: EmConfig,
    /// Evenly thins each model's training pairs down to at most this many.
    pub max_training_pairs: Option<usize>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            conditional_components: 10,
            pooled_components: 20,
            history_depth: 3,
            input_dims: vec![1, 2, 4, 5, 7, 8],
            em: EmConfig {
                max_iters: 150,
                restarts: 2,
                ..EmConfig::default()
            },
            max_training_pairs: Some(6000),
        }
    }
}

impl EvolutionConfig {
    pub fn history(&self) -> Result<StateHistory> {
        StateHistory::new(3, self.history_depth, self.input_dims.clone())
    }
}

fn thin<T: Clone>(items: Vec<T>, cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(cap) if cap > 0 && items.len() > cap => {
            let n = items.len();
            (0..cap).map(|i| items[i * n / cap].clone()).collect()
        }
        _ => items,
    }
}

fn fit_increment_model(
    history: &StateHistory,
    trajectories: &[&LabeledTrajectory],
    components: usize,
    cfg: &EvolutionConfig,
    seed: u64,
) -> Result<CgmrModel<f64>> {
    let mut pairs = Vec::new();
    for t in trajectories {
        let (inputs, outputs) = history.training_pairs(&t.states);
        pairs.extend(inputs.into_iter().zip(outputs));
    }
    let pairs = thin(pairs, cfg.max_training_pairs);
    let (inputs, outputs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let em = EmConfig { seed, ..cfg.em.clone() };
    CgmrModel::fit(&inputs, &outputs, components, &em)
}

fn state_bounds() -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    (
        vec![None, Some(0.0), Some(-X3_LIMIT)],
        vec![None, None, Some(X3_LIMIT)],
    )
}

/// One regression model per behavior, in spec order.
pub fn train_conditional_evolution(
    spec: &BehaviorSpec,
    train: &[LabeledTrajectory],
    cfg: &EvolutionConfig,
) -> Result<BehaviorEvolution<f64>> {
    let history = cfg.history()?;
    let mut models = Vec::with_capacity(spec.behaviors.len());
    for (b, behavior) in spec.behaviors.iter().enumerate() {
        let members = train
            .iter()
            .filter(|t| behavior_of(spec, t).ok() == Some(b))
            .collect::<Vec<_>>();
        let model = fit_increment_model(&history, &members, cfg.conditional_components, cfg, cfg.em.seed ^ b as u64)
            .map_err(|e| e.context(format!("training evolution model for behavior {}", behavior.id)))?;
        models.push(model);
    }
    let (lo, hi) = state_bounds();
    BehaviorEvolution::new(models, history, lo, hi)
}

/// A single regression model on all behaviors pooled.
pub fn train_pooled_evolution(
    train: &[LabeledTrajectory],
    cfg: &EvolutionConfig,
) -> Result<BehaviorEvolution<f64>> {
    let history = cfg.history()?;
    let all: Vec<&LabeledTrajectory> = train.iter().collect();
    let model = fit_increment_model(&history, &all, cfg.pooled_components, cfg, cfg.em.seed)
        .map_err(|e| e.context("training pooled evolution model"))?;
    let (lo, hi) = state_bounds();
    BehaviorEvolution::new(vec![model], history, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::synthetic::{generate_trajectory, GenerateOptions};
    use nalgebra::dvector;

    #[test]
    fn slope_features() {
        let obs: Vec<_> = (0..8).map(|t| dvector![0.0, 2.0 * t as f64]).collect();
        let f = recognition_features(&obs, &FeatureConfig { lag: 3, include_level: true }, 0.5);
        assert_eq!(f[0], dvector![0.0, 0.0]);
        assert_eq!(f[1], dvector![2.0, 4.0]);
        assert_eq!(f[7], dvector![14.0, 4.0]);
        let g = recognition_features(&obs, &FeatureConfig::default(), 0.5);
        assert_eq!(g[7].len(), 1);
    }

    #[test]
    fn thinning_is_even_and_capped() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(thin(v.clone(), Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(thin(v.clone(), Some(20)), v);
        assert_eq!(thin(v.clone(), None), v);
    }

    #[test]
    fn classifier_trace_waits_for_a_full_window() {
        let spec = BehaviorSpec::numerical();
        let train: Vec<_> = (0..8)
            .map(|i| {
                let b = &spec.behaviors[i % 4].id;
                generate_trajectory(&spec, b, i as u64, 120, &GenerateOptions::default()).unwrap()
            })
            .collect();
        let fc = FeatureConfig::default();
        let model = train_classifier(&spec, &train, &fc, ClassifierKind::Gnb, 10, 5, &ClassifierConfig::default()).unwrap();
        let r = Recognizer::Classifier { model, window: 10 };
        let trace = r.trace(&recognition_features(&train[0].observations, &fc, spec.dt)).unwrap();
        assert!(trace[8].is_none());
        let p = trace[9].as_ref().unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert_eq!(r.latency(), 10);
    }

    #[test]
    fn evolution_models_cover_every_behavior() {
        let spec = BehaviorSpec::numerical();
        let train: Vec<_> = (0..8)
            .map(|i| {
                let b = &spec.behaviors[i % 4].id;
                generate_trajectory(&spec, b, i as u64, 200, &GenerateOptions::default()).unwrap()
            })
            .collect();
        let cfg = EvolutionConfig {
            conditional_components: 2,
            pooled_components: 3,
            em: EmConfig {
                max_iters: 30,
                restarts: 1,
                ..EmConfig::default()
            },
            ..EvolutionConfig::default()
        };
        let cond = train_conditional_evolution(&spec, &train, &cfg).unwrap();
        assert_eq!(cond.models.len(), 4);
        let pooled = train_pooled_evolution(&train, &cfg).unwrap();
        assert_eq!(pooled.models.len(), 1);
        assert_eq!(pooled.models[0].joint().n_components(), 3);
    }
}
