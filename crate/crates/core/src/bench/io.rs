//! Trajectory CSV files, model files and particle dumps.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::synthetic::{LabeledTrajectory, StepLabel};
use crate::belief::MixtureBelief;
use crate::error::{Error, Result};
use crate::evolution::{BehaviorEvolution, CgmrModel, Gmm, HtspmModel};
use crate::recognition::{ClassifierModel, DhmmStack, GaussianHmm};
use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;

/// Formats a float with 17 significant digits, enough to round-trip an f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Column names of a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id: String,
    pub step: String,
    pub state: Vec<String>,
    pub observation: Vec<String>,
    /// `[behavior, stage, sub-stage]`; `None` reads unlabeled files.
    pub labels: Option<[String; 3]>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        let s = |x: &str| x.to_string();
        Self {
            id: s("trajectory_id"),
            step: s("step"),
            state: vec![s("x1"), s("x2"), s("x3")],
            observation: vec![s("z1"), s("z2")],
            labels: Some([s("behavior"), s("stage"), s("sub_stage")]),
        }
    }
}

impl CsvSchema {
    fn header(&self) -> Vec<String> {
        let mut h = vec![self.id.clone(), self.step.clone()];
        h.extend(self.state.iter().cloned());
        h.extend(self.observation.iter().cloned());
        if let Some(l) = &self.labels {
            h.extend(l.iter().cloned());
        }
        h
    }
}

/// Writes trajectories in the default column layout.
pub fn write_trajectories_csv<W: Write>(writer: W, trajectories: &[LabeledTrajectory]) -> Result<()> {
    let schema = CsvSchema::default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(schema.header())?;
    for t in trajectories {
        for i in 0..t.len() {
            let mut row = vec![t.id.clone(), t.steps[i].to_string()];
            row.extend(t.states[i].iter().map(|&v| fmt_f64(v)));
            row.extend(t.observations[i].iter().map(|&v| fmt_f64(v)));
            match &t.labels {
                Some(l) => row.extend([l[i].behavior.clone(), l[i].stage.clone(), l[i].sub_stage.clone()]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(path: &Path, trajectories: &[LabeledTrajectory]) -> Result<()> {
    write_trajectories_csv(BufWriter::new(File::create(path)?), trajectories)
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<LabeledTrajectory>> {
    read_trajectories_csv(BufReader::new(File::open(path)?), schema)
}

/// Parses rows into trajectories grouped by id, in order of first appearance.
/// Steps must increase strictly within a trajectory.
pub fn read_trajectories_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<LabeledTrajectory>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let step_col = col(&schema.step)?;
    let state_cols = schema.state.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let obs_cols = schema.observation.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let label_cols = match &schema.labels {
        Some(l) => Some([col(&l[0])?, col(&l[1])?, col(&l[2])?]),
        None => None,
    };

    let mut order: Vec<LabeledTrajectory> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, record) in r.records().enumerate() {
        // Line 1 is the header.
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let number = |c: usize| -> Result<f64> {
            field(c).parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("`{}` is not a number", field(c)),
            })
        };
        let id = field(id_col).to_string();
        let step: usize = field(step_col).parse().map_err(|_| Error::Parse {
            line,
            message: format!("`{}` is not a step index", field(step_col)),
        })?;
        let state = state_cols.iter().map(|&c| number(c)).collect::<Result<Vec<_>>>()?;
        let obs = obs_cols.iter().map(|&c| number(c)).collect::<Result<Vec<_>>>()?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(LabeledTrajectory {
                id: id.clone(),
                steps: Vec::new(),
                states: Vec::new(),
                observations: Vec::new(),
                labels: label_cols.map(|_| Vec::new()),
            });
            order.len() - 1
        });
        let t = &mut order[slot];
        if t.steps.last().is_some_and(|&last| step <= last) {
            return Err(Error::Parse {
                line,
                message: format!("step {step} does not increase within trajectory {id}"),
            });
        }
        t.steps.push(step);
        t.states.push(DVector::from_vec(state));
        t.observations.push(DVector::from_vec(obs));
        if let (Some(cols), Some(labels)) = (label_cols, t.labels.as_mut()) {
            labels.push(StepLabel {
                behavior: field(cols[0]).to_string(),
                stage: field(cols[1]).to_string(),
                sub_stage: field(cols[2]).to_string(),
            });
        }
    }
    Ok(order)
}

/// A model type that can be written with [`save_model`].
pub trait Persist: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

impl<S: Scalar> Persist for GaussianHmm<S> {
    const KIND: &'static str = "gaussian-hmm";
}
impl<S: Scalar> Persist for Gmm<S> {
    const KIND: &'static str = "gmm";
}
impl<S: Scalar> Persist for CgmrModel<S> {
    const KIND: &'static str = "cgmr";
}
impl<S: Scalar> Persist for DhmmStack<S> {
    const KIND: &'static str = "dhmm";
}
impl<S: Scalar> Persist for BehaviorEvolution<S> {
    const KIND: &'static str = "behavior-evolution";
}
impl<S: Scalar> Persist for HtspmModel<S> {
    const KIND: &'static str = "htspm";
}
impl<S: Scalar> Persist for ClassifierModel<S> {
    const KIND: &'static str = "classifier";
}
impl Persist for super::training::Recognizer {
    const KIND: &'static str = "recognizer";
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    schema_version: u32,
    kind: &'a str,
    model: &'a T,
}

pub fn model_to_json<T: Persist>(model: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&EnvelopeOut {
        schema_version: SCHEMA_VERSION,
        kind: T::KIND,
        model,
    })?)
}

pub fn model_from_json<T: Persist>(text: &str) -> Result<T> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Schema("model file is not a JSON object".into()))?;
    let version = obj
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Schema("missing schema_version".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(Error::VersionMismatch {
            expected: SCHEMA_VERSION,
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    match obj.get("kind").and_then(|k| k.as_str()) {
        Some(k) if k == T::KIND => {}
        Some(k) => return Err(Error::Schema(format!("expected a {} model, found {k}", T::KIND))),
        None => return Err(Error::Schema("missing kind".into())),
    }
    let model = obj
        .remove("model")
        .ok_or_else(|| Error::Schema("missing model".into()))?;
    serde_json::from_value(model).map_err(|e| Error::Schema(e.to_string()))
}

pub fn save_model<T: Persist>(path: &Path, model: &T) -> Result<()> {
    std::fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model<T: Persist>(path: &Path) -> Result<T> {
    model_from_json(&std::fs::read_to_string(path)?)
}

#[derive(Serialize)]
struct ParticleRecord<'a> {
    step: usize,
    component_id: usize,
    pi: f64,
    state: &'a [f64],
    weight: f64,
}

/// One JSON line per particle.
pub fn write_particle_dump<W: Write>(writer: &mut W, belief: &MixtureBelief<f64>) -> Result<()> {
    for c in &belief.components {
        for p in &c.particles {
            let rec = ParticleRecord {
                step: belief.step,
                component_id: c.id,
                pi: c.pi,
                state: p.state.as_slice(),
                weight: p.weight,
            };
            serde_json::to_writer(&mut *writer, &rec)?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::synthetic::{generate_trajectory, BehaviorSpec, GenerateOptions};
    use crate::evolution::{cgmr_condition, EmConfig};
    use nalgebra::{dmatrix, dvector};

    fn sample_trajectories() -> Vec<LabeledTrajectory> {
        let spec = BehaviorSpec::numerical();
        ["I", "III"]
            .iter()
            .enumerate()
            .map(|(i, b)| generate_trajectory(&spec, b, i as u64, 30, &GenerateOptions::default()).unwrap())
            .collect()
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let text = "trajectory_id,step,x1,x2,x3,z1,z2,behavior,stage,sub_stage\n";
        let out = read_trajectories_csv(text.as_bytes(), &CsvSchema::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn round_trip() {
        let ts = sample_trajectories();
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &ts).unwrap();
        let back = read_trajectories_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back.len(), ts.len());
        for (a, b) in ts.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.steps, b.steps);
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.states.iter().zip(&b.states).chain(a.observations.iter().zip(&b.observations)) {
                assert!((x - y).amax() <= 1e-9);
            }
        }
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let ts = sample_trajectories();
        export_csv(&path, &ts).unwrap();
        let back = ingest_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back[1].states[29], ts[1].states[29]);
    }

    #[test]
    fn bad_number_names_line() {
        let text = "trajectory_id,step,x1,x2,x3,z1,z2,behavior,stage,sub_stage\n\
                    a,0,1,2,3,1,2,I,A,1\n\
                    a,1,1,oops,3,1,2,I,A,1\n";
        match read_trajectories_csv(text.as_bytes(), &CsvSchema::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_non_monotone_steps() {
        let text = "trajectory_id,step,x1,x2,z1,z2\n";
        assert!(matches!(
            read_trajectories_csv(text.as_bytes(), &CsvSchema::default()),
            Err(Error::MissingColumn(c)) if c == "x3"
        ));
        let schema = CsvSchema {
            labels: None,
            ..CsvSchema::default()
        };
        let text = "trajectory_id,step,x1,x2,x3,z1,z2\na,1,0,0,0,0,0\na,1,0,0,0,0,0\n";
        assert!(matches!(
            read_trajectories_csv(text.as_bytes(), &schema),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn unlabeled_schema_and_custom_columns() {
        let schema = CsvSchema {
            id: "vehicle".into(),
            step: "frame".into(),
            state: vec!["px".into()],
            observation: vec!["mx".into()],
            labels: None,
        };
        let text = "frame,vehicle,mx,px\n0,v1,1.5,1.0\n0,v2,2.5,2.0\n1,v1,3.5,3.0\n";
        let out = read_trajectories_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].steps, vec![0, 1]);
        assert_eq!(out[0].observations[1][0], 3.5);
        assert!(out[0].labels.is_none());
    }

    fn hmm() -> GaussianHmm<f64> {
        GaussianHmm::new(
            vec![0.3, 0.7],
            dmatrix![0.9, 0.1; 0.2, 0.8],
            vec![dvector![0.1, -1.0 / 3.0], dvector![2.0, 1e-7]],
            vec![dvector![1.0, 0.5], dvector![0.25, 3.0]],
        )
        .unwrap()
    }

    #[test]
    fn hmm_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hmm.json");
        save_model(&path, &hmm()).unwrap();
        let back: GaussianHmm<f64> = load_model(&path).unwrap();
        assert_eq!(back, hmm());
    }

    #[test]
    fn wrong_version_or_kind_rejected() {
        let text = model_to_json(&hmm()).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(
            model_from_json::<GaussianHmm<f64>>(&text),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
        let text = model_to_json(&hmm()).unwrap();
        assert!(matches!(model_from_json::<Gmm<f64>>(&text), Err(Error::Schema(_))));
        assert!(matches!(model_from_json::<GaussianHmm<f64>>("[1]"), Err(Error::Schema(_))));
    }

    #[test]
    fn cgmr_round_trip_conditions_identically() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        let inputs: Vec<DVector<f64>> = (0..200).map(|_| dvector![n.sample(&mut rng), n.sample(&mut rng)]).collect();
        let outputs: Vec<DVector<f64>> = inputs
            .iter()
            .map(|x| dvector![2.0 * x[0] - x[1] + 0.1 * n.sample(&mut rng)])
            .collect();
        let cfg = EmConfig {
            restarts: 1,
            ..EmConfig::default()
        };
        let model = CgmrModel::fit(&inputs, &outputs, 2, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cgmr.json");
        save_model(&path, &model).unwrap();
        let back: CgmrModel<f64> = load_model(&path).unwrap();
        let x = dvector![0.3, -0.7];
        let a = cgmr_condition(&model, &x).unwrap();
        let b = cgmr_condition(&back, &x).unwrap();
        for (ma, mb) in a.means.iter().zip(&b.means) {
            assert!((ma - mb).amax() <= 1e-12);
        }
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert!((wa - wb).abs() <= 1e-12);
        }
    }

    #[test]
    fn particle_dump_has_one_line_per_particle() {
        let belief = MixtureBelief::from_state_groups(vec![vec![dvector![1.0], dvector![2.0]], vec![dvector![3.0]]]).unwrap();
        let mut buf = Vec::new();
        write_particle_dump(&mut buf, &belief).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["component_id"], 0);
        assert_eq!(first["weight"], 0.5);
    }
}
