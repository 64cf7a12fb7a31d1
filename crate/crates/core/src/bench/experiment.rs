//! Config-driven benchmark runs: model preparation, tracking of every test
//! trajectory with every requested model, metrics and report files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{fmt_f64, ingest_csv, load_model, save_model, CsvSchema, Persist};
use super::metrics::{compute_ade, compute_mae};
use super::synthetic::{derive_seed, generate_dataset, BehaviorSpec, DatasetConfig, LabeledTrajectory};
use super::tracking::{
    belief_errors, predict_gaussian, predict_particles, track_gaussian, track_particles_with, ModelKind,
    ParticleDynamics, StepBelief, TrackOutput, TrackerSettings,
};
use super::training::{
    recognition_features, train_classifier, train_conditional_evolution, train_dhmm, train_pooled_evolution,
    EvolutionConfig, FeatureConfig, Recognizer,
};
use crate::error::{Error, Result};
use crate::evolution::BehaviorEvolution;
use crate::recognition::{ClassifierConfig, ClassifierKind, DhmmTrainingConfig};

pub const RECOGNIZER_FILE: &str = "recognizer.json";
pub const CONDITIONAL_FILE: &str = "evolution-cgmr.json";
pub const POOLED_FILE: &str = "evolution-ggmr.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecognizerKind {
    Dhmm,
    FlatHmm,
    Gnb,
    Lda,
    Qda,
}

impl FromStr for RecognizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dhmm" => Ok(Self::Dhmm),
            "flathmm" | "flat-hmm" => Ok(Self::FlatHmm),
            "gnb" => Ok(Self::Gnb),
            "lda" => Ok(Self::Lda),
            "qda" => Ok(Self::Qda),
            other => Err(Error::InvalidConfig(format!("unknown recognizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerConfig {
    pub kind: RecognizerKind,
    pub dhmm: DhmmTrainingConfig,
    pub classifier: ClassifierConfig,
    /// Trailing window of the flat classifiers, in frames.
    pub window: usize,
    /// Spacing of the classifiers' training windows.
    pub stride: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            kind: RecognizerKind::Dhmm,
            dhmm: DhmmTrainingConfig::default(),
            classifier: ClassifierConfig::default(),
            window: 20,
            stride: 5,
        }
    }
}

/// Inclusive range of steps with no measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRange {
    pub start: usize,
    pub end: usize,
}

impl StepRange {
    pub fn contains(&self, step: usize) -> bool {
        (self.start..=self.end).contains(&step)
    }
}

/// Test trajectories read from CSV instead of generated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub horizon: usize,
    /// First prediction origin.
    pub first_origin: usize,
    /// Spacing between prediction origins.
    pub origin_stride: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            first_origin: 60,
            origin_stride: 20,
        }
    }
}

/// Everything a run depends on. Serialized as JSON; the hash of this
/// serialization is embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub spec: BehaviorSpec,
    pub dataset: DatasetConfig,
    pub test_data: Option<DataSource>,
    /// Restrict the test set to these behaviors; empty keeps all.
    pub behaviors: Vec<String>,
    pub tracker: TrackerSettings,
    pub features: FeatureConfig,
    pub recognizer: RecognizerConfig,
    pub evolution: EvolutionConfig,
    pub models: Vec<ModelKind>,
    pub occlusions: Vec<StepRange>,
    pub prediction: PredictionConfig,
    /// Draws per step used to score Gaussian posteriors.
    pub cloud_samples: usize,
    /// Models are loaded from here when present, and saved here after training.
    pub model_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            spec: BehaviorSpec::numerical(),
            dataset: DatasetConfig::default(),
            test_data: None,
            behaviors: Vec::new(),
            tracker: TrackerSettings::default(),
            features: FeatureConfig::default(),
            recognizer: RecognizerConfig::default(),
            evolution: EvolutionConfig::default(),
            models: vec![ModelKind::Htspm, ModelKind::Ggmr, ModelKind::Ssm, ModelKind::Ekf, ModelKind::Ukf],
            occlusions: Vec::new(),
            prediction: PredictionConfig::default(),
            cloud_samples: 200,
            model_dir: None,
            output_dir: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.spec.validate()?;
        if self.models.is_empty() {
            return bad("no models selected".into());
        }
        let t = &self.tracker;
        if t.particles == 0 {
            return bad("tracker.particles must be at least 1".into());
        }
        if !(t.ess_threshold_ratio > 0.0 && t.ess_threshold_ratio <= 1.0) {
            return bad("tracker.ess_threshold_ratio must lie in (0, 1]".into());
        }
        if t.max_rejection_draws == 0 {
            return bad("tracker.max_rejection_draws must be at least 1".into());
        }
        if !(t.dt > 0.0) {
            return bad("tracker.dt must be positive".into());
        }
        if t.miss_distance.is_some_and(|d| !(d > 0.0)) {
            return bad("tracker.miss_distance must be positive".into());
        }
        if t.noise.process_variances.iter().chain(&t.noise.measurement_variances).any(|&v| !(v >= 0.0)) {
            return bad("noise variances must be nonnegative".into());
        }
        if self.features.lag == 0 {
            return bad("features.lag must be at least 1".into());
        }
        let r = &self.recognizer;
        if r.window == 0 || r.stride == 0 {
            return bad("recognizer window and stride must be positive".into());
        }
        if r.dhmm.windows.is_empty() || r.dhmm.windows.contains(&0) {
            return bad("recognizer.dhmm.windows must be nonempty and positive".into());
        }
        self.evolution.history()?;
        for b in &self.behaviors {
            if self.spec.behavior_index(b).is_none() {
                return bad(format!("unknown behavior `{b}`"));
            }
        }
        for o in &self.occlusions {
            if o.start == 0 || o.start > o.end {
                return bad(format!("occlusion {}..={} must satisfy 1 <= start <= end", o.start, o.end));
            }
        }
        if self.prediction.horizon == 0 || self.prediction.origin_stride == 0 {
            return bad("prediction horizon and origin_stride must be positive".into());
        }
        if self.cloud_samples == 0 {
            return bad("cloud_samples must be at least 1".into());
        }
        Ok(())
    }

    /// Hex sha256 of the JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn needs_recognizer(&self) -> bool {
        self.models.contains(&ModelKind::Htspm)
    }
}

/// Models shared by all trajectories of a run.
#[derive(Debug, Clone, Default)]
pub struct TrainedModels {
    pub recognizer: Option<Recognizer>,
    pub conditional: Option<BehaviorEvolution<f64>>,
    pub pooled: Option<BehaviorEvolution<f64>>,
}

pub fn train_recognizer(cfg: &ScenarioConfig, train: &[LabeledTrajectory]) -> Result<Recognizer> {
    let r = &cfg.recognizer;
    let classifier = |kind| -> Result<Recognizer> {
        Ok(Recognizer::Classifier {
            model: train_classifier(&cfg.spec, train, &cfg.features, kind, r.window, r.stride, &r.classifier)?,
            window: r.window,
        })
    };
    match r.kind {
        RecognizerKind::Dhmm => Ok(Recognizer::Dhmm {
            stack: train_dhmm(&cfg.spec, train, &cfg.features, &r.dhmm)?,
        }),
        RecognizerKind::FlatHmm => classifier(ClassifierKind::FlatHmm),
        RecognizerKind::Gnb => classifier(ClassifierKind::Gnb),
        RecognizerKind::Lda => classifier(ClassifierKind::Lda),
        RecognizerKind::Qda => classifier(ClassifierKind::Qda),
    }
}

fn load_or_train<T: Persist>(dir: Option<&Path>, file: &str, train: impl FnOnce() -> Result<T>) -> Result<T> {
    if let Some(dir) = dir {
        let path = dir.join(file);
        if path.exists() {
            log::info!("loading {}", path.display());
            return load_model(&path).map_err(|e| e.context(format!("loading {}", path.display())));
        }
    }
    let model = train()?;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        save_model(&dir.join(file), &model)?;
    }
    Ok(model)
}

/// Loads each model the selected trackers need from `model_dir`, training
/// (and saving) whatever is missing. The training split is only generated
/// when something has to be trained.
pub fn prepare_models(cfg: &ScenarioConfig) -> Result<TrainedModels> {
    let mut train_cache: Option<Vec<LabeledTrajectory>> = None;
    let mut train_set = || -> Result<Vec<LabeledTrajectory>> {
        if train_cache.is_none() {
            let ds = generate_dataset(&cfg.spec, &cfg.dataset, cfg.seed)?;
            train_cache = Some(ds.train);
        }
        Ok(train_cache.clone().unwrap_or_default())
    };
    let dir = cfg.model_dir.as_deref();
    let mut models = TrainedModels::default();
    if cfg.needs_recognizer() {
        models.recognizer = Some(
            load_or_train(dir, RECOGNIZER_FILE, || train_recognizer(cfg, &train_set()?))
                .map_err(|e| e.context("preparing recognizer"))?,
        );
        models.conditional = Some(
            load_or_train(dir, CONDITIONAL_FILE, || {
                train_conditional_evolution(&cfg.spec, &train_set()?, &cfg.evolution)
            })
            .map_err(|e| e.context("preparing conditional evolution"))?,
        );
    }
    if cfg.models.contains(&ModelKind::Ggmr) {
        models.pooled = Some(
            load_or_train(dir, POOLED_FILE, || train_pooled_evolution(&train_set()?, &cfg.evolution))
                .map_err(|e| e.context("preparing pooled evolution"))?,
        );
    }
    Ok(models)
}

/// The run's test trajectories: ingested when a data source is configured,
/// otherwise the generated test split, filtered by behavior.
pub fn test_set(cfg: &ScenarioConfig) -> Result<Vec<LabeledTrajectory>> {
    let all = match &cfg.test_data {
        Some(src) => ingest_csv(&src.path, &src.schema).map_err(|e| e.context(format!("reading {}", src.path.display())))?,
        None => generate_dataset(&cfg.spec, &cfg.dataset, cfg.seed)?.test,
    };
    if cfg.behaviors.is_empty() {
        return Ok(all);
    }
    Ok(all
        .into_iter()
        .filter(|t| t.behavior().is_some_and(|b| cfg.behaviors.iter().any(|x| x == b)))
        .collect())
}

/// Measurements with the configured occlusions applied.
pub fn occluded_observations(t: &LabeledTrajectory, occlusions: &[StepRange]) -> Vec<Option<DVector<f64>>> {
    t.observations
        .iter()
        .enumerate()
        .map(|(k, z)| (!occlusions.iter().any(|o| o.contains(k))).then(|| z.clone()))
        .collect()
}

/// Occluded frames repeat the last seen measurement for the recognizer.
fn held_observations(obs: &[Option<DVector<f64>>]) -> Vec<DVector<f64>> {
    let mut last = obs.iter().flatten().next().cloned().unwrap_or_else(|| DVector::zeros(2));
    obs.iter()
        .map(|z| {
            if let Some(z) = z {
                last = z.clone();
            }
            last.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub model: ModelKind,
    /// Posterior mean per step.
    pub estimates: Vec<[f64; 3]>,
    /// `|mean − truth|` per step.
    pub step_errors: Vec<[f64; 3]>,
    /// Expected `|x − truth|` under the posterior per step.
    pub cloud_errors: Vec<[f64; 3]>,
    /// Mean of `step_errors` over steps `1..`.
    pub mae: [f64; 3],
    pub cloud_mae: [f64; 3],
    pub alerts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub id: String,
    pub behavior: Option<String>,
    pub seed: u64,
    pub runs: Vec<ModelRun>,
    /// Recognizer output per step, when a recognizer was used.
    pub recognition: Option<Vec<Option<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub model: ModelKind,
    pub dimension: String,
    pub mae: f64,
    pub cloud_mae: f64,
    pub trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepErrorRow {
    pub model: ModelKind,
    pub step: usize,
    pub mean: [f64; 3],
    pub cloud: [f64; 3],
    pub trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub preparation_secs: f64,
    pub tracking_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub models: Vec<ModelKind>,
    pub class_labels: Vec<String>,
    pub trajectories: Vec<TrajectoryReport>,
    pub mae: Vec<MaeRow>,
    pub timing: Timing,
}

const DIMS: [&str; 3] = ["x1", "x2", "x3"];

fn to_array(v: &DVector<f64>) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn mean_rows(rows: &[[f64; 3]]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for r in rows {
        for d in 0..3 {
            out[d] += r[d];
        }
    }
    out.map(|x| x / rows.len().max(1) as f64)
}

impl RunReport {
    /// MAE of `model` per dimension, averaged over trajectories.
    pub fn mae_of(&self, model: ModelKind) -> Option<[f64; 3]> {
        let rows: Vec<_> = self.mae.iter().filter(|r| r.model == model).collect();
        (rows.len() == 3).then(|| [rows[0].mae, rows[1].mae, rows[2].mae])
    }

    pub fn cloud_mae_of(&self, model: ModelKind) -> Option<[f64; 3]> {
        let rows: Vec<_> = self.mae.iter().filter(|r| r.model == model).collect();
        (rows.len() == 3).then(|| [rows[0].cloud_mae, rows[1].cloud_mae, rows[2].cloud_mae])
    }

    pub fn diverged(&self) -> bool {
        self.trajectories.iter().flat_map(|t| &t.runs).any(|r| !r.alerts.is_empty())
    }

    /// Errors per (model, step), averaged over the trajectories reaching that step.
    pub fn per_step_errors(&self) -> Vec<StepErrorRow> {
        let mut rows = Vec::new();
        for &model in &self.models {
            let runs: Vec<&ModelRun> = self
                .trajectories
                .iter()
                .flat_map(|t| t.runs.iter().filter(|r| r.model == model))
                .collect();
            let longest = runs.iter().map(|r| r.step_errors.len()).max().unwrap_or(0);
            for step in 0..longest {
                let at: Vec<&ModelRun> = runs.iter().copied().filter(|r| r.step_errors.len() > step).collect();
                let mean: Vec<[f64; 3]> = at.iter().map(|r| r.step_errors[step]).collect();
                let cloud: Vec<[f64; 3]> = at.iter().map(|r| r.cloud_errors[step]).collect();
                rows.push(StepErrorRow {
                    model,
                    step,
                    mean: mean_rows(&mean),
                    cloud: mean_rows(&cloud),
                    trajectories: at.len(),
                });
            }
        }
        rows
    }

    /// Writes `report.json`, `mae.csv`, `per_step_errors.csv`,
    /// `estimates.csv`, `recognition.csv` and `events.jsonl` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("report.json"))?), self)?;

        let mut w = csv::Writer::from_path(dir.join("mae.csv"))?;
        w.write_record(["model", "dimension", "mae", "cloud_mae", "trajectories"])?;
        for r in &self.mae {
            w.write_record([
                r.model.name().to_string(),
                r.dimension.clone(),
                fmt_f64(r.mae),
                fmt_f64(r.cloud_mae),
                r.trajectories.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("per_step_errors.csv"))?;
        w.write_record(["model", "step", "x1", "x2", "x3", "cloud_x1", "cloud_x2", "cloud_x3", "trajectories"])?;
        for r in self.per_step_errors() {
            let mut rec = vec![r.model.name().to_string(), r.step.to_string()];
            rec.extend(r.mean.iter().chain(&r.cloud).map(|&x| fmt_f64(x)));
            rec.push(r.trajectories.to_string());
            w.write_record(rec)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("estimates.csv"))?;
        w.write_record(["trajectory_id", "model", "step", "x1", "x2", "x3"])?;
        for t in &self.trajectories {
            for r in &t.runs {
                for (k, e) in r.estimates.iter().enumerate() {
                    let mut rec = vec![t.id.clone(), r.model.name().to_string(), k.to_string()];
                    rec.extend(e.iter().map(|&x| fmt_f64(x)));
                    w.write_record(rec)?;
                }
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("recognition.csv"))?;
        let mut header = vec!["trajectory_id".to_string(), "step".to_string()];
        header.extend(self.class_labels.iter().cloned());
        w.write_record(&header)?;
        for t in &self.trajectories {
            for (k, p) in t.recognition.iter().flatten().enumerate() {
                if let Some(p) = p {
                    let mut rec = vec![t.id.clone(), k.to_string()];
                    rec.extend(p.iter().map(|&x| fmt_f64(x)));
                    w.write_record(rec)?;
                }
            }
        }
        w.flush()?;

        let mut events = BufWriter::new(File::create(dir.join("events.jsonl"))?);
        for t in &self.trajectories {
            for r in &t.runs {
                for &step in &r.alerts {
                    let line = serde_json::json!({
                        "trajectory_id": t.id,
                        "model": r.model.name(),
                        "step": step,
                        "event": "divergence-alert",
                    });
                    writeln!(events, "{line}")?;
                }
            }
        }
        events.flush()?;
        Ok(())
    }
}

/// Per-trajectory inputs derived once and shared by every model.
struct Prepared<'a> {
    traj: &'a LabeledTrajectory,
    seed: u64,
    observations: Vec<Option<DVector<f64>>>,
    probabilities: Option<Vec<Option<DVector<f64>>>>,
}

fn prepare<'a>(cfg: &ScenarioConfig, models: &TrainedModels, traj: &'a LabeledTrajectory, index: usize) -> Result<Prepared<'a>> {
    if traj.len() < 2 {
        return Err(Error::InvalidInput(format!("trajectory {} needs at least two steps", traj.id)));
    }
    if traj.states.first().is_none_or(|s| s.len() != 3) {
        return Err(Error::InvalidInput(format!("trajectory {} has no 3-D ground-truth states", traj.id)));
    }
    let observations = occluded_observations(traj, &cfg.occlusions);
    let probabilities = match &models.recognizer {
        Some(r) if cfg.needs_recognizer() => {
            let features = recognition_features(&held_observations(&observations), &cfg.features, cfg.spec.dt);
            Some(r.trace(&features)?)
        }
        _ => None,
    };
    Ok(Prepared {
        traj,
        seed: derive_seed(cfg.seed, "track", index as u64),
        observations,
        probabilities,
    })
}

fn dynamics_for<'m>(kind: ModelKind, models: &'m TrainedModels, settings: &TrackerSettings) -> Result<(ParticleDynamics<'m>, usize)> {
    let missing = |what: &str| Error::InvalidConfig(format!("{} needs a {what} model", kind.name()));
    Ok(match kind {
        ModelKind::Htspm => {
            let evo = models.conditional.as_ref().ok_or_else(|| missing("conditional evolution"))?;
            (ParticleDynamics::Evolution(evo), evo.models.len())
        }
        ModelKind::Ggmr => (ParticleDynamics::Evolution(models.pooled.as_ref().ok_or_else(|| missing("pooled evolution"))?), 1),
        ModelKind::Ssm => (ParticleDynamics::linear(settings)?, 1),
        ModelKind::Ekf | ModelKind::Ukf => unreachable!("Gaussian filters have no particle dynamics"),
    })
}

fn track_one(
    cfg: &ScenarioConfig,
    models: &TrainedModels,
    p: &Prepared<'_>,
    kind: ModelKind,
    inspect: &mut dyn FnMut(usize, &crate::belief::MixtureBelief<f64>, &DVector<f64>) -> Result<()>,
) -> Result<TrackOutput> {
    if !kind.is_particle_filter() {
        return track_gaussian(kind, &p.observations, &cfg.tracker);
    }
    let (dynamics, n_classes) = dynamics_for(kind, models, &cfg.tracker)?;
    let probs = if kind == ModelKind::Htspm { p.probabilities.as_deref() } else { None };
    track_particles_with(&dynamics, &p.observations, probs, n_classes, &cfg.tracker, p.seed, inspect)
}

fn model_run(cfg: &ScenarioConfig, kind: ModelKind, out: TrackOutput, p: &Prepared<'_>) -> Result<ModelRun> {
    let truth = &p.traj.states;
    let step_errors: Vec<[f64; 3]> = out
        .estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| to_array(&(e - t).abs()))
        .collect();
    let cloud: Vec<DVector<f64>> = belief_errors(&out, truth, cfg.cloud_samples, p.seed ^ kind as u64)?;
    let mae = to_array(&compute_mae(&out.estimates[1..], &truth[1..])?);
    let cloud_errors: Vec<[f64; 3]> = cloud.iter().map(to_array).collect();
    Ok(ModelRun {
        model: kind,
        estimates: out.estimates.iter().map(to_array).collect(),
        step_errors,
        cloud_mae: mean_rows(&cloud_errors[1..]),
        cloud_errors,
        mae,
        alerts: out.alerts,
    })
}

fn run_trajectory(cfg: &ScenarioConfig, models: &TrainedModels, traj: &LabeledTrajectory, index: usize) -> Result<TrajectoryReport> {
    let p = prepare(cfg, models, traj, index)?;
    let mut runs = Vec::with_capacity(cfg.models.len());
    for &kind in &cfg.models {
        let out = track_one(cfg, models, &p, kind, &mut |_, _, _| Ok(()))
            .map_err(|e| e.context(format!("tracking {} with {}", traj.id, kind.name())))?;
        runs.push(model_run(cfg, kind, out, &p)?);
    }
    Ok(TrajectoryReport {
        id: traj.id.clone(),
        behavior: traj.behavior().map(str::to_string),
        seed: p.seed,
        runs,
        recognition: p
            .probabilities
            .map(|ps| ps.into_iter().map(|x| x.map(|v| v.iter().copied().collect())).collect()),
    })
}

fn summarize(models: &[ModelKind], trajectories: &[TrajectoryReport]) -> Vec<MaeRow> {
    let mut rows = Vec::new();
    for &model in models {
        let runs: Vec<&ModelRun> = trajectories
            .iter()
            .flat_map(|t| t.runs.iter().filter(|r| r.model == model))
            .collect();
        if runs.is_empty() {
            continue;
        }
        let mae = mean_rows(&runs.iter().map(|r| r.mae).collect::<Vec<_>>());
        let cloud = mean_rows(&runs.iter().map(|r| r.cloud_mae).collect::<Vec<_>>());
        for d in 0..3 {
            rows.push(MaeRow {
                model,
                dimension: DIMS[d].to_string(),
                mae: mae[d],
                cloud_mae: cloud[d],
                trajectories: runs.len(),
            });
        }
    }
    rows
}

/// Tracks every test trajectory with every configured model. Trajectories
/// run in parallel; each draws from its own seed derived from the master
/// seed, so results do not depend on scheduling.
pub fn run_experiment(cfg: &ScenarioConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let test = test_set(cfg).map_err(|e| e.context("loading test set"))?;
    let models = if test.is_empty() { TrainedModels::default() } else { prepare_models(cfg)? };
    run_on(cfg, &models, &test, start.elapsed().as_secs_f64())
}

/// [`run_experiment`] with already prepared models.
pub fn run_experiment_with(cfg: &ScenarioConfig, models: &TrainedModels) -> Result<RunReport> {
    cfg.validate()?;
    let test = test_set(cfg).map_err(|e| e.context("loading test set"))?;
    run_on(cfg, models, &test, 0.0)
}

fn run_on(cfg: &ScenarioConfig, models: &TrainedModels, test: &[LabeledTrajectory], preparation_secs: f64) -> Result<RunReport> {
    let start = Instant::now();
    let trajectories = test
        .par_iter()
        .enumerate()
        .map(|(i, t)| run_trajectory(cfg, models, t, i))
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        models: cfg.models.clone(),
        class_labels: models
            .recognizer
            .as_ref()
            .map(|_| cfg.spec.behaviors.iter().map(|b| b.id.clone()).collect())
            .unwrap_or_default(),
        mae: summarize(&cfg.models, &trajectories),
        trajectories,
        timing: Timing {
            preparation_secs,
            tracking_secs: start.elapsed().as_secs_f64(),
        },
    };
    if let Some(dir) = &cfg.output_dir {
        report.write_outputs(dir)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdeRow {
    pub model: ModelKind,
    pub ade: f64,
    /// Prediction origins scored.
    pub origins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub config_hash: String,
    pub seed: u64,
    pub horizon: usize,
    pub rows: Vec<AdeRow>,
}

impl PredictionReport {
    pub fn ade_of(&self, model: ModelKind) -> Option<f64> {
        self.rows.iter().find(|r| r.model == model).map(|r| r.ade)
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("prediction.json"))?), self)?;
        let mut w = csv::Writer::from_path(dir.join("ade.csv"))?;
        w.write_record(["model", "horizon", "ade", "origins"])?;
        for r in &self.rows {
            w.write_record([r.model.name().to_string(), self.horizon.to_string(), fmt_f64(r.ade), r.origins.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn origins(cfg: &PredictionConfig, len: usize) -> Vec<usize> {
    (cfg.first_origin.max(1)..)
        .step_by(cfg.origin_stride)
        .take_while(|&k| k + cfg.horizon < len)
        .collect()
}

/// `(sum of ADE over origins, origins)` for one trajectory and model.
fn predict_one(cfg: &ScenarioConfig, models: &TrainedModels, p: &Prepared<'_>, kind: ModelKind) -> Result<(f64, usize)> {
    let h = cfg.prediction.horizon;
    let starts = origins(&cfg.prediction, p.traj.len());
    let truth = |k: usize| -> Vec<[f64; 2]> { p.traj.states[k + 1..=k + h].iter().map(|s| [s[0], s[1]]).collect() };
    let mut total = 0.0;
    if kind.is_particle_filter() {
        let (dynamics, _) = dynamics_for(kind, models, &cfg.tracker)?;
        let mut inspect = |k: usize, belief: &crate::belief::MixtureBelief<f64>, context: &DVector<f64>| -> Result<()> {
            if starts.contains(&k) {
                let context = if kind == ModelKind::Htspm { context.clone() } else { DVector::from_element(1, 1.0) };
                let seed = derive_seed(p.seed, "predict", k as u64);
                let predicted = predict_particles(&dynamics, belief, &context, h, &cfg.tracker, seed)?;
                total += compute_ade(&predicted, &truth(k))?;
            }
            Ok(())
        };
        track_one(cfg, models, p, kind, &mut inspect)?;
    } else {
        let out = track_gaussian(kind, &p.observations, &cfg.tracker)?;
        for &k in &starts {
            let StepBelief::Gaussian { mean, covariance } = &out.beliefs[k] else {
                unreachable!("Gaussian trackers return Gaussian beliefs")
            };
            let predicted = predict_gaussian(kind, mean, covariance, h, &cfg.tracker)?;
            total += compute_ade(&predicted, &truth(k))?;
        }
    }
    Ok((total, starts.len()))
}

/// Tracks each test trajectory and, at every configured origin, rolls the
/// posterior forward `prediction.horizon` steps without measurements. Scores
/// the mean predicted `(x₁, x₂)` by ADE against the true states.
pub fn run_prediction(cfg: &ScenarioConfig) -> Result<PredictionReport> {
    cfg.validate()?;
    let test = test_set(cfg).map_err(|e| e.context("loading test set"))?;
    let models = if test.is_empty() { TrainedModels::default() } else { prepare_models(cfg)? };
    let per_traj = test
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let p = prepare(cfg, &models, t, i)?;
            cfg.models
                .iter()
                .map(|&kind| {
                    predict_one(cfg, &models, &p, kind)
                        .map_err(|e| e.context(format!("predicting {} with {}", t.id, kind.name())))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = cfg
        .models
        .iter()
        .enumerate()
        .filter_map(|(m, &model)| {
            let (sum, n) = per_traj.iter().fold((0.0, 0), |(s, n), r| (s + r[m].0, n + r[m].1));
            (n > 0).then(|| AdeRow {
                model,
                ade: sum / n as f64,
                origins: n,
            })
        })
        .collect();
    let report = PredictionReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        horizon: cfg.prediction.horizon,
        rows,
    };
    if let Some(dir) = &cfg.output_dir {
        report.write_outputs(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ScenarioConfig {
        ScenarioConfig {
            dataset: DatasetConfig {
                train_per_behavior: 0,
                validation_per_behavior: 0,
                test_per_behavior: 1,
                length: Some(60),
            },
            models: vec![ModelKind::Ssm, ModelKind::Ekf, ModelKind::Ukf],
            cloud_samples: 20,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = ScenarioConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);
        assert!(matches!(ScenarioConfig::from_json(r#"{"sede": 3}"#), Err(Error::InvalidConfig(_))));
        let partial = ScenarioConfig::from_json(
            r#"{"seed": 9, "tracker": {"particles": 50}, "recognizer": {"dhmm": {"baum_welch": {"restarts": 1}}}}"#,
        )
        .unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.tracker.particles, 50);
        assert_eq!(partial.tracker.dt, cfg.tracker.dt);
        assert_eq!(partial.recognizer.dhmm.baum_welch.restarts, 1);
        assert_eq!(partial.recognizer.dhmm.baum_welch.max_iters, cfg.recognizer.dhmm.baum_welch.max_iters);
        assert_ne!(partial.hash(), cfg.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.models.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.occlusions = vec![StepRange { start: 0, end: 3 }];
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.behaviors = vec!["IX".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_test_set_gives_empty_report() {
        let mut cfg = small_config();
        cfg.dataset.test_per_behavior = 0;
        cfg.models = ScenarioConfig::default().models;
        let report = run_experiment(&cfg).unwrap();
        assert!(report.trajectories.is_empty());
        assert!(report.mae.is_empty());
    }

    #[test]
    fn comparison_emits_one_row_per_model_and_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.output_dir = Some(dir.path().to_path_buf());
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.trajectories.len(), 4);
        assert_eq!(report.mae.len(), 3 * 3);
        for t in &report.trajectories {
            for r in &t.runs {
                assert_eq!(r.estimates.len(), 60);
            }
        }
        let rows = report.per_step_errors();
        assert_eq!(rows.len(), 3 * 60);
        let mae = std::fs::read_to_string(dir.path().join("mae.csv")).unwrap();
        assert_eq!(mae.lines().count(), 1 + 9);
        assert!(mae.lines().nth(1).unwrap().starts_with("SSM,x1,"));
        for f in ["report.json", "per_step_errors.csv", "estimates.csv", "recognition.csv", "events.jsonl"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        // Same config, same numbers.
        let again = run_experiment(&small_config()).unwrap();
        assert_eq!(again.mae, report.mae);
    }

    #[test]
    fn occluded_steps_have_no_measurement() {
        let mut cfg = small_config();
        cfg.occlusions = vec![StepRange { start: 10, end: 12 }];
        let t = &test_set(&cfg).unwrap()[0];
        let obs = occluded_observations(t, &cfg.occlusions);
        assert!(obs[9].is_some() && obs[10].is_none() && obs[12].is_none() && obs[13].is_some());
        let held = held_observations(&obs);
        assert_eq!(held[11], t.observations[9]);
        assert!(run_experiment(&cfg).is_ok());
    }

    #[test]
    fn behavior_filter_restricts_test_set() {
        let mut cfg = small_config();
        cfg.behaviors = vec!["II".into(), "III".into()];
        let test = test_set(&cfg).unwrap();
        assert_eq!(test.len(), 2);
        assert!(test.iter().all(|t| matches!(t.behavior(), Some("II" | "III"))));
    }

    #[test]
    fn prediction_scores_every_origin() {
        let mut cfg = small_config();
        cfg.prediction = PredictionConfig {
            horizon: 5,
            first_origin: 20,
            origin_stride: 10,
        };
        let report = run_prediction(&cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        // Origins 20, 30, 40, 50 on four trajectories.
        assert!(report.rows.iter().all(|r| r.origins == 16));
        assert!(report.rows.iter().all(|r| r.ade.is_finite() && r.ade > 0.0));
    }

    #[test]
    fn models_are_saved_and_reloaded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.dataset.train_per_behavior = 4;
        cfg.models = vec![ModelKind::Ggmr];
        cfg.evolution.pooled_components = 2;
        cfg.evolution.em.restarts = 1;
        cfg.evolution.em.max_iters = 10;
        cfg.model_dir = Some(dir.path().to_path_buf());
        let first = prepare_models(&cfg).unwrap();
        assert!(dir.path().join(POOLED_FILE).exists());
        let second = prepare_models(&cfg).unwrap();
        assert_eq!(first.pooled, second.pooled);
        assert!(first.recognizer.is_none());
    }
}
