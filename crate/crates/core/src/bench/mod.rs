//! Synthetic benchmark: trajectory generation, model training, trackers,
//! metrics, persistence and end-to-end experiment runs.

pub mod experiment;
pub mod io;
pub mod metrics;
pub mod scenarios;
pub mod synthetic;
pub mod tracking;
pub mod training;

pub use io::{
    export_csv, ingest_csv, load_model, read_trajectories_csv, save_model, write_particle_dump,
    write_trajectories_csv, CsvSchema, Persist, SCHEMA_VERSION,
};
pub use metrics::{compute_ade, compute_mae};
pub use synthetic::{
    derive_seed, generate_dataset, generate_trajectory, BehaviorSpec, Dataset, DatasetConfig, GenerateOptions,
    LabeledTrajectory, StepLabel,
};
pub use experiment::{
    run_experiment, run_experiment_with, run_prediction, PredictionReport, RecognizerKind, RunReport, ScenarioConfig, StepRange,
};
pub use scenarios::{run_scenario, ScenarioKind, ScenarioOutcome};
