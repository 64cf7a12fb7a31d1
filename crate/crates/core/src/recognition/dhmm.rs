//! The layered HMM recognizer.
//!
//! Layer `l` slides a window of `T_l` frames over its input and scores every
//! window under each of its class HMMs. The per-class scores form the next
//! layer's input frames; the last layer's scores go through a calibrated
//! softmax to give class probabilities.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::bic::select_hidden_states_bic;
use super::hmm::{hmm_fit_baum_welch, hmm_forward_loglik, softmax, BaumWelchConfig, GaussianHmm};
use crate::error::{Error, Result};
use crate::evolution::EmConfig;
use crate::scalar::Scalar;

/// What a layer passes upward for each window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaFeature {
    /// Per-class log-likelihood divided by the window length.
    #[default]
    LogLikelihood,
    /// One-hot vector of the most likely class.
    BestClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DhmmLayer<S: Scalar> {
    pub models: Vec<GaussianHmm<S>>,
    pub window: usize,
    #[serde(default)]
    pub feature: MetaFeature,
}

impl<S: Scalar> DhmmLayer<S> {
    pub fn new(models: Vec<GaussianHmm<S>>, window: usize) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidInput("a layer needs at least one class model".into()));
        }
        if window < 2 {
            return Err(Error::InvalidInput("layer window must be at least 2".into()));
        }
        let dim = models[0].dim();
        if let Some(m) = models.iter().find(|m| m.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: m.dim(),
            });
        }
        Ok(Self {
            models,
            window,
            feature: MetaFeature::LogLikelihood,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.models.len()
    }

    pub fn input_dim(&self) -> usize {
        self.models[0].dim()
    }

    fn score(&self, window: &[DVector<S>]) -> Result<DVector<S>> {
        let t = S::of_count(window.len());
        let mut out = DVector::zeros(self.models.len());
        for (o, m) in out.iter_mut().zip(&self.models) {
            *o = hmm_forward_loglik(m, window)? / t;
        }
        if self.feature == MetaFeature::BestClass {
            let best = out.argmax().0;
            out.fill(S::zero());
            out[best] = S::one();
        }
        Ok(out)
    }
}

/// Sliding-window meta features: frame `i` scores `obs[i+1 ..= i+T]`, so the
/// output has `len − T` frames and frame `i` ends at input index `i + T`.
pub fn dhmm_meta_features<S: Scalar>(layer: &DhmmLayer<S>, obs: &[DVector<S>]) -> Result<Vec<DVector<S>>> {
    let t = layer.window;
    if obs.len() <= t {
        return Err(Error::WindowTooLong { len: obs.len(), window: t });
    }
    (0..obs.len() - t).map(|i| layer.score(&obs[i + 1..=i + t])).collect()
}

/// How the last-layer offsets `α_h` are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", bound = "")]
pub enum Calibration<S: Scalar> {
    /// `α_h = −L_h(t₀)` at each sequence's first emitted frame.
    PerSequence,
    /// Offsets fixed ahead of time, e.g. learned from training sequences.
    Fixed { offsets: Vec<S> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DhmmStack<S: Scalar> {
    pub layers: Vec<DhmmLayer<S>>,
    pub calibration: Calibration<S>,
    pub class_labels: Vec<String>,
}

impl<S: Scalar> DhmmStack<S> {
    pub fn new(layers: Vec<DhmmLayer<S>>, calibration: Calibration<S>, class_labels: Vec<String>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::InvalidInput("a stack needs at least one layer".into()))?;
        if class_labels.len() != last.n_classes() {
            return Err(Error::LengthMismatch {
                left: class_labels.len(),
                right: last.n_classes(),
            });
        }
        if let Calibration::Fixed { offsets } = &calibration {
            if offsets.len() != last.n_classes() {
                return Err(Error::LengthMismatch {
                    left: offsets.len(),
                    right: last.n_classes(),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim() != pair[0].n_classes() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].n_classes(),
                    found: pair[1].input_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            calibration,
            class_labels,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Total window length: the number of input frames consumed before the
    /// first probability vector appears.
    pub fn latency(&self) -> usize {
        self.layers.iter().map(|l| l.window).sum()
    }

    /// Last-layer meta features for a whole sequence.
    pub fn final_features(&self, raw: &[DVector<S>]) -> Result<Vec<DVector<S>>> {
        let mut obs = raw.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            obs = dhmm_meta_features(layer, &obs).map_err(|e| e.context(format!("layer {}", l + 1)))?;
        }
        Ok(obs)
    }

    fn offsets_for(&self, first: &DVector<S>) -> DVector<S> {
        match &self.calibration {
            Calibration::PerSequence => -first,
            Calibration::Fixed { offsets } => DVector::from_column_slice(offsets),
        }
    }
}

/// Class probabilities for every emitted frame; output frame `j` has seen the
/// input up to index `j + latency`.
pub fn dhmm_recognize<S: Scalar>(stack: &DhmmStack<S>, raw: &[DVector<S>]) -> Result<Vec<DVector<S>>> {
    let features = stack.final_features(raw)?;
    let offsets = stack.offsets_for(&features[0]);
    Ok(features.iter().map(|f| softmax(&(f + &offsets))).collect())
}

/// Incremental recognizer: one input frame in, at most one probability
/// vector out. Emits exactly the frames [`dhmm_recognize`] would.
#[derive(Debug, Clone)]
pub struct DhmmStream<'a, S: Scalar> {
    stack: &'a DhmmStack<S>,
    buffers: Vec<VecDeque<DVector<S>>>,
    seen: Vec<usize>,
    offsets: Option<DVector<S>>,
}

impl<'a, S: Scalar> DhmmStream<'a, S> {
    pub fn new(stack: &'a DhmmStack<S>) -> Self {
        Self {
            stack,
            buffers: stack.layers.iter().map(|l| VecDeque::with_capacity(l.window)).collect(),
            seen: vec![0; stack.layers.len()],
            offsets: None,
        }
    }

    pub fn push(&mut self, frame: DVector<S>) -> Result<Option<DVector<S>>> {
        if frame.len() != self.stack.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.stack.input_dim(),
                found: frame.len(),
            });
        }
        let mut current = frame;
        for (l, layer) in self.stack.layers.iter().enumerate() {
            let buf = &mut self.buffers[l];
            if buf.len() == layer.window {
                buf.pop_front();
            }
            buf.push_back(current);
            self.seen[l] += 1;
            if self.seen[l] <= layer.window {
                return Ok(None);
            }
            let window: Vec<DVector<S>> = buf.iter().cloned().collect();
            current = layer.score(&window)?;
        }
        let offsets = self
            .offsets
            .get_or_insert_with(|| self.stack.offsets_for(&current));
        Ok(Some(softmax(&(current + &*offsets))))
    }

    pub fn reset(&mut self) {
        for b in &mut self.buffers {
            b.clear();
        }
        self.seen.fill(0);
        self.offsets = None;
    }
}

/// Input features with one label track per layer (`labels[l][t]` is the
/// layer-`l` class of frame `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence<S: Scalar> {
    pub features: Vec<DVector<S>>,
    pub labels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    PerSequence,
    /// Offsets are minus the mean first-frame score over the training set.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DhmmTrainingConfig {
    /// One window per layer, bottom first.
    pub windows: Vec<usize>,
    /// Hidden-state counts tried by BIC for every class model.
    pub state_candidates: Vec<usize>,
    pub baum_welch: BaumWelchConfig,
    pub bic: EmConfig,
    pub calibration: CalibrationMode,
    /// Replace each fitted initial distribution by the chain's occupancy, so
    /// windows that start mid-segment are scored fairly.
    pub window_initial: bool,
}

impl Default for DhmmTrainingConfig {
    fn default() -> Self {
        Self {
            windows: vec![15, 15, 15],
            state_candidates: vec![1, 2, 3, 4],
            baum_welch: BaumWelchConfig::default(),
            bic: EmConfig {
                restarts: 1,
                ..EmConfig::default()
            },
            calibration: CalibrationMode::PerSequence,
            window_initial: true,
        }
    }
}

fn class_seed(base: u64, layer: usize, class: usize) -> u64 {
    base ^ ((layer as u64) << 32 | class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Maximal runs of frames carrying `class`, at least two frames long.
fn segments<S: Scalar>(obs: &[DVector<S>], labels: &[usize], class: usize) -> Vec<Vec<DVector<S>>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for (x, &l) in obs.iter().zip(labels) {
        if l == class {
            current.push(x.clone());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out.retain(|s| s.len() >= 2);
    out
}

/// Trains the stack bottom-up: layer `l` fits one HMM per class on that
/// class's labeled segments of the layer input, then turns every sequence
/// into its meta-feature sequence for layer `l + 1`.
pub fn dhmm_train<S: Scalar>(
    sequences: &[LabeledSequence<S>],
    class_counts: &[usize],
    class_labels: Vec<String>,
    cfg: &DhmmTrainingConfig,
) -> Result<DhmmStack<S>> {
    let depth = cfg.windows.len();
    if depth == 0 || class_counts.len() != depth {
        return Err(Error::InvalidConfig("need one window and one class count per layer".into()));
    }
    if sequences.is_empty() {
        return Err(Error::InvalidInput("no training sequences".into()));
    }
    for s in sequences {
        if s.labels.len() != depth || s.labels.iter().any(|l| l.len() != s.features.len()) {
            return Err(Error::InvalidInput("every sequence needs one full label track per layer".into()));
        }
    }
    let mut obs: Vec<Vec<DVector<S>>> = sequences.iter().map(|s| s.features.clone()).collect();
    let mut labels: Vec<Vec<Vec<usize>>> = sequences.iter().map(|s| s.labels.clone()).collect();
    let mut layers = Vec::with_capacity(depth);
    for (l, (&window, &classes)) in cfg.windows.iter().zip(class_counts).enumerate() {
        let mut models = Vec::with_capacity(classes);
        for h in 0..classes {
            let data: Vec<Vec<DVector<S>>> = obs
                .iter()
                .zip(&labels)
                .flat_map(|(o, lab)| segments(o, &lab[l], h))
                .collect();
            if data.is_empty() {
                return Err(Error::DegenerateData(format!("no training segments for class {h} of layer {}", l + 1)));
            }
            let seed = class_seed(cfg.baum_welch.seed, l, h);
            let states = select_hidden_states_bic(&data, &cfg.state_candidates, &EmConfig { seed, ..cfg.bic })?;
            let mut hmm = hmm_fit_baum_welch(&data, states, &BaumWelchConfig { seed, ..cfg.baum_welch })
                .map_err(|e| e.context(format!("layer {} class {h}", l + 1)))?;
            if cfg.window_initial {
                hmm.initial = hmm.occupancy();
            }
            models.push(hmm);
        }
        let layer = DhmmLayer::new(models, window)?;
        let mut next_obs = Vec::with_capacity(obs.len());
        let mut next_labels = Vec::with_capacity(obs.len());
        for (o, lab) in obs.iter().zip(&labels) {
            if o.len() <= window {
                continue;
            }
            next_obs.push(dhmm_meta_features(&layer, o)?);
            next_labels.push(lab.iter().map(|track| track[window..].to_vec()).collect());
        }
        obs = next_obs;
        labels = next_labels;
        layers.push(layer);
    }
    let calibration = match cfg.calibration {
        CalibrationMode::PerSequence => Calibration::PerSequence,
        CalibrationMode::Learned => {
            let firsts: Vec<&DVector<S>> = obs.iter().filter_map(|o| o.first()).collect();
            if firsts.is_empty() {
                return Err(Error::DegenerateData("no sequence is longer than the stack latency".into()));
            }
            let mean = firsts.iter().fold(DVector::zeros(firsts[0].len()), |a, f| a + *f) / S::of_count(firsts.len());
            Calibration::Fixed {
                offsets: (-mean).iter().copied().collect(),
            }
        }
    };
    DhmmStack::new(layers, calibration, class_labels)
}
