//! The synthetic multi-level behavior generator.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lower bound on x₂ and symmetric bound on x₃ during generation.
pub const X2_MIN: f64 = 0.0;
pub const X3_LIMIT: f64 = 10.0;
/// Variances of the generator noise laws.
pub const V1_VAR: f64 = 0.5;
pub const V2_HALF_WIDTH: f64 = 1.0;
pub const V3_HALF_WIDTH: f64 = 0.1;
pub const MEASUREMENT_VAR: f64 = 0.5;
pub const X3_INIT_VAR: f64 = 0.1;

/// Derives an independent seed for `(tag, index)` from a master seed, so a
/// task's stream does not depend on the order tasks run in.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// The per-sub-stage forcing term `g(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Forcing {
    Constant { value: f64 },
    Cos { amplitude: f64, frequency: f64 },
    Sin { amplitude: f64, frequency: f64 },
}

impl Forcing {
    pub fn eval(&self, k: usize) -> f64 {
        let k = k as f64;
        match *self {
            Forcing::Constant { value } => value,
            Forcing::Cos { amplitude, frequency } => amplitude * (frequency * k).cos(),
            Forcing::Sin { amplitude, frequency } => amplitude * (frequency * k).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubStage {
    pub id: String,
    pub g: Forcing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub id: String,
    pub sub_stages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub id: String,
    pub stages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub sub_stages: Vec<SubStage>,
    pub stages: Vec<Stage>,
    pub behaviors: Vec<Behavior>,
    pub sub_stage_duration: usize,
    pub dt: f64,
}

/// Labels of one step as indices into the spec's lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleSlot {
    pub behavior: usize,
    pub stage: usize,
    pub sub_stage: usize,
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        Self::numerical()
    }
}

impl BehaviorSpec {
    /// Six sub-stages, five stages, four behaviors; stages B→(C,D) and B→(D,E)
    /// make behaviors II and III identical for their first stage.
    pub fn numerical() -> Self {
        let sub = |id: &str, g| SubStage { id: id.into(), g };
        let stage = |id: &str, a: &str, b: &str| Stage {
            id: id.into(),
            sub_stages: vec![a.into(), b.into()],
        };
        let behavior = |id: &str, s: [&str; 3]| Behavior {
            id: id.into(),
            stages: s.iter().map(|x| x.to_string()).collect(),
        };
        Self {
            sub_stages: vec![
                sub("1", Forcing::Constant { value: 1.5 }),
                sub("2", Forcing::Cos { amplitude: 1.5, frequency: 0.1 }),
                sub("3", Forcing::Constant { value: -0.75 }),
                sub("4", Forcing::Sin { amplitude: 3.0, frequency: 0.1 }),
                sub("5", Forcing::Constant { value: -3.0 }),
                sub("6", Forcing::Constant { value: 3.0 }),
            ],
            stages: vec![
                stage("A", "1", "2"),
                stage("B", "3", "4"),
                stage("C", "5", "6"),
                stage("D", "2", "3"),
                stage("E", "4", "5"),
            ],
            behaviors: vec![
                behavior("I", ["A", "B", "C"]),
                behavior("II", ["B", "C", "D"]),
                behavior("III", ["B", "D", "E"]),
                behavior("IV", ["D", "E", "A"]),
            ],
            sub_stage_duration: 40,
            dt: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sub_stage_duration < 1 {
            return bad("sub_stage_duration must be at least 1".into());
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive".into());
        }
        for s in &self.stages {
            if s.sub_stages.is_empty() {
                return bad(format!("stage {} has no sub-stages", s.id));
            }
            for id in &s.sub_stages {
                if self.sub_stage_index(id).is_none() {
                    return bad(format!("stage {} references unknown sub-stage {id}", s.id));
                }
            }
        }
        for b in &self.behaviors {
            if b.stages.is_empty() {
                return bad(format!("behavior {} has no stages", b.id));
            }
            for id in &b.stages {
                if self.stage_index(id).is_none() {
                    return bad(format!("behavior {} references unknown stage {id}", b.id));
                }
            }
        }
        Ok(())
    }

    pub fn behavior_index(&self, id: &str) -> Option<usize> {
        self.behaviors.iter().position(|b| b.id == id)
    }

    pub fn stage_index(&self, id: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.id == id)
    }

    pub fn sub_stage_index(&self, id: &str) -> Option<usize> {
        self.sub_stages.iter().position(|s| s.id == id)
    }

    /// Steps in a full run of `behavior`.
    pub fn duration(&self, behavior: usize) -> usize {
        self.behaviors[behavior]
            .stages
            .iter()
            .map(|s| self.stages[self.stage_index(s).expect("validated")].sub_stages.len())
            .sum::<usize>()
            * self.sub_stage_duration
    }

    /// Schedule entry at step `t`; steps past the end repeat the last slot.
    pub fn slot(&self, behavior: usize, t: usize) -> ScheduleSlot {
        let mut block = t / self.sub_stage_duration;
        let b = &self.behaviors[behavior];
        let mut last = None;
        for stage_id in &b.stages {
            let stage = self.stage_index(stage_id).expect("validated");
            for sub_id in &self.stages[stage].sub_stages {
                let slot = ScheduleSlot {
                    behavior,
                    stage,
                    sub_stage: self.sub_stage_index(sub_id).expect("validated"),
                };
                if block == 0 {
                    return slot;
                }
                block -= 1;
                last = Some(slot);
            }
        }
        last.expect("behavior has at least one sub-stage")
    }

    /// One noise-free step of the generator dynamics, with clipping.
    pub fn step_mean(&self, x: &[f64; 3], g: f64) -> [f64; 3] {
        let dt = self.dt;
        [
            x[0] + 2.0 * x[1] * dt + x[2] * dt * dt,
            (x[1] + x[2] * dt).max(X2_MIN),
            (x[2] + g).clamp(-X3_LIMIT, X3_LIMIT),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLabel {
    pub behavior: String,
    pub stage: String,
    pub sub_stage: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrajectory {
    pub id: String,
    /// Step index of each row.
    pub steps: Vec<usize>,
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub labels: Option<Vec<StepLabel>>,
}

impl LabeledTrajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn behavior(&self) -> Option<&str> {
        self.labels.as_ref()?.first().map(|l| l.behavior.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub noise_free: bool,
    pub initial_state: Option<[f64; 3]>,
    /// Offset added to every step index fed to `g(k)` and written to `steps`.
    #[serde(default)]
    pub start_step: usize,
}

/// Simulates `length` steps of `behavior`. Per step the noise is drawn in the
/// fixed order v₁, v₂, v₃, w₁, w₂, so equal seeds give equal trajectories for
/// as long as two behaviors share their schedule.
pub fn generate_trajectory(
    spec: &BehaviorSpec,
    behavior: &str,
    seed: u64,
    length: usize,
    options: &GenerateOptions,
) -> Result<LabeledTrajectory> {
    spec.validate()?;
    let b = spec
        .behavior_index(behavior)
        .ok_or_else(|| Error::InvalidInput(format!("unknown behavior {behavior}")))?;
    if length > spec.duration(b) {
        return Err(Error::InvalidInput(format!(
            "length {length} exceeds behavior duration {}",
            spec.duration(b)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n01 = Normal::new(0.0, 1.0).expect("valid normal");
    let v2 = Uniform::new_inclusive(-V2_HALF_WIDTH, V2_HALF_WIDTH).expect("valid range");
    let v3 = Uniform::new_inclusive(-V3_HALF_WIDTH, V3_HALF_WIDTH).expect("valid range");
    let mut x = match options.initial_state {
        Some(x0) => x0,
        None => [
            rng.random_range(0.0..20.0),
            rng.random_range(10.0..20.0),
            X3_INIT_VAR.sqrt() * n01.sample(&mut rng),
        ],
    };
    let noise = |rng: &mut ChaCha8Rng, scale: f64, d: &dyn Fn(&mut ChaCha8Rng) -> f64| {
        let v = d(rng);
        if options.noise_free {
            0.0
        } else {
            v * scale
        }
    };
    let mut states = Vec::with_capacity(length);
    let mut observations = Vec::with_capacity(length);
    let mut labels = Vec::with_capacity(length);
    let mut steps = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            let slot = spec.slot(b, t - 1);
            let g = spec.sub_stages[slot.sub_stage].g.eval(options.start_step + t - 1);
            let mean = spec.step_mean(&x, g);
            let e1 = noise(&mut rng, V1_VAR.sqrt(), &|r| n01.sample(r));
            let e2 = noise(&mut rng, 1.0, &|r| v2.sample(r));
            let e3 = noise(&mut rng, 1.0, &|r| v3.sample(r));
            let dt = spec.dt;
            x = [
                x[0] + 2.0 * x[1] * dt + x[2] * dt * dt + e1,
                (x[1] + x[2] * dt + e2).max(X2_MIN),
                (x[2] + g + e3).clamp(-X3_LIMIT, X3_LIMIT),
            ];
            if options.noise_free {
                x = mean;
            }
        }
        let w1 = noise(&mut rng, MEASUREMENT_VAR.sqrt(), &|r| n01.sample(r));
        let w2 = noise(&mut rng, MEASUREMENT_VAR.sqrt(), &|r| n01.sample(r));
        states.push(DVector::from_row_slice(&x));
        observations.push(DVector::from_vec(vec![x[0] + w1, x[1] + w2]));
        let slot = spec.slot(b, t);
        labels.push(StepLabel {
            behavior: spec.behaviors[b].id.clone(),
            stage: spec.stages[slot.stage].id.clone(),
            sub_stage: spec.sub_stages[slot.sub_stage].id.clone(),
        });
        steps.push(options.start_step + t);
    }
    Ok(LabeledTrajectory {
        id: format!("{behavior}-{seed}"),
        steps,
        states,
        observations,
        labels: Some(labels),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_per_behavior: usize,
    pub validation_per_behavior: usize,
    pub test_per_behavior: usize,
    /// Steps per trajectory; `None` uses each behavior's full duration.
    pub length: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_per_behavior: 50,
            validation_per_behavior: 10,
            test_per_behavior: 20,
            length: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledTrajectory>,
    pub validation: Vec<LabeledTrajectory>,
    pub test: Vec<LabeledTrajectory>,
}

/// Fresh train/validation/test splits for every behavior in the spec.
pub fn generate_dataset(spec: &BehaviorSpec, cfg: &DatasetConfig, master_seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let split = |tag: &str, count: usize| -> Result<Vec<LabeledTrajectory>> {
        let mut out = Vec::with_capacity(count * spec.behaviors.len());
        for (b, behavior) in spec.behaviors.iter().enumerate() {
            let len = cfg.length.unwrap_or_else(|| spec.duration(b));
            for i in 0..count {
                let seed = derive_seed(master_seed, tag, i as u64);
                let mut t = generate_trajectory(spec, &behavior.id, seed, len, &GenerateOptions::default())?;
                t.id = format!("{tag}-{}-{i}", behavior.id);
                out.push(t);
            }
        }
        Ok(out)
    };
    Ok(Dataset {
        train: split("train", cfg.train_per_behavior)?,
        validation: split("validation", cfg.validation_per_behavior)?,
        test: split("test", cfg.test_per_behavior)?,
    })
}
