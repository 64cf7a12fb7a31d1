use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cmsmc::bench::experiment::{train_recognizer, CONDITIONAL_FILE, POOLED_FILE, RECOGNIZER_FILE};
use cmsmc::bench::tracking::{DivergencePolicy, ModelKind};
use cmsmc::bench::training::{train_conditional_evolution, train_pooled_evolution};
use cmsmc::bench::{
    export_csv, generate_dataset, ingest_csv, run_experiment, run_prediction, run_scenario, save_model, CsvSchema,
    LabeledTrajectory, RecognizerKind, RunReport, ScenarioConfig, ScenarioKind,
};
use cmsmc::engine::ConstraintStrategy;
use cmsmc::error::Error;

#[derive(Parser)]
#[command(name = "cmsmc", version, about = "Constrained mixture SMC tracking benchmark")]
struct Cli {
    /// JSON run configuration; defaults are used for anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Particles per mixture component.
    #[arg(long, global = true)]
    particles: Option<usize>,
    #[arg(long, global = true, value_enum)]
    strategy: Option<Strategy>,
    /// What a divergence alert does; `stop` ends the run with exit code 3.
    #[arg(long, global = true, value_enum)]
    on_divergence: Option<OnDivergence>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    ZeroWeight,
    Rejection,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnDivergence {
    Stop,
    Reinitialize,
    Continue,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecognizerArg {
    Dhmm,
    Flathmm,
    Gnb,
    Lda,
    Qda,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvolutionArg {
    Cgmr,
    Ggmr,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Htspm,
    Ggmr,
    Ssm,
    Ekf,
    Ukf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Occlusion,
    BirthDeath,
    Crossing,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generated train, validation and test splits as CSV.
    Generate,
    /// Train models and save them into the output directory.
    Train {
        #[arg(long, value_enum)]
        recognizer: Option<RecognizerArg>,
        #[arg(long, value_enum)]
        evolution: Option<EvolutionArg>,
        /// Train on trajectories from this CSV instead of generated ones.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Track the test trajectories with the configured models.
    Track {
        #[arg(long, value_delimiter = ',', value_enum)]
        models: Vec<ModelArg>,
        /// Load models from here, training any that are missing.
        #[arg(long)]
        model_dir: Option<PathBuf>,
    },
    /// Score multi-step prediction from tracked posteriors.
    Predict {
        #[arg(long)]
        horizon: usize,
        #[arg(long, value_delimiter = ',', value_enum)]
        models: Vec<ModelArg>,
        #[arg(long)]
        model_dir: Option<PathBuf>,
    },
    /// Run every model and write the MAE and per-step error tables.
    Compare {
        #[arg(long)]
        model_dir: Option<PathBuf>,
    },
    /// Run a preset scenario over a range of seeds.
    Scenario {
        #[arg(value_enum)]
        kind: ScenarioArg,
        /// Number of seeds, starting at `--seed` (default 0).
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn model_kind(m: ModelArg) -> ModelKind {
    match m {
        ModelArg::Htspm => ModelKind::Htspm,
        ModelArg::Ggmr => ModelKind::Ggmr,
        ModelArg::Ssm => ModelKind::Ssm,
        ModelArg::Ekf => ModelKind::Ekf,
        ModelArg::Ukf => ModelKind::Ukf,
    }
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.particles {
        cfg.tracker.particles = n;
    }
    if let Some(s) = cli.strategy {
        cfg.tracker.strategy = match s {
            Strategy::ZeroWeight => ConstraintStrategy::ZeroWeight,
            Strategy::Rejection => ConstraintStrategy::Rejection,
        };
    }
    if let Some(p) = cli.on_divergence {
        cfg.tracker.on_divergence = match p {
            OnDivergence::Stop => DivergencePolicy::Stop,
            OnDivergence::Reinitialize => DivergencePolicy::Reinitialize,
            OnDivergence::Continue => DivergencePolicy::Continue,
        };
    }
    cfg.output_dir = Some(cli.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn print_mae(report: &RunReport) {
    println!("{:<6} {:>10} {:>10} {:>10}", "model", "x1", "x2", "x3");
    for &m in &report.models {
        if let Some(mae) = report.mae_of(m) {
            println!("{:<6} {:>10.4} {:>10.4} {:>10.4}", m.name(), mae[0], mae[1], mae[2]);
        }
    }
    if report.diverged() {
        let alerts: usize = report.trajectories.iter().flat_map(|t| &t.runs).map(|r| r.alerts.len()).sum();
        println!("divergence alerts: {alerts} (see events.jsonl)");
    }
}

fn with_models(mut cfg: ScenarioConfig, models: &[ModelArg], model_dir: Option<PathBuf>) -> ScenarioConfig {
    if !models.is_empty() {
        cfg.models = models.iter().copied().map(model_kind).collect();
    }
    if model_dir.is_some() {
        cfg.model_dir = model_dir;
    }
    cfg
}

fn training_set(cfg: &ScenarioConfig, data: Option<&Path>) -> Result<Vec<LabeledTrajectory>> {
    Ok(match data {
        Some(path) => ingest_csv(path, &CsvSchema::default())?,
        None => generate_dataset(&cfg.spec, &cfg.dataset, cfg.seed)?.train,
    })
}

fn train(
    cfg: &ScenarioConfig,
    out: &Path,
    recognizer: Option<RecognizerArg>,
    evolution: Option<EvolutionArg>,
    data: Option<&Path>,
) -> Result<()> {
    let everything = recognizer.is_none() && evolution.is_none();
    let train = training_set(cfg, data)?;
    fs::create_dir_all(out)?;
    if everything || recognizer.is_some() {
        let mut cfg = cfg.clone();
        if let Some(r) = recognizer {
            cfg.recognizer.kind = match r {
                RecognizerArg::Dhmm => RecognizerKind::Dhmm,
                RecognizerArg::Flathmm => RecognizerKind::FlatHmm,
                RecognizerArg::Gnb => RecognizerKind::Gnb,
                RecognizerArg::Lda => RecognizerKind::Lda,
                RecognizerArg::Qda => RecognizerKind::Qda,
            };
        }
        let model = train_recognizer(&cfg, &train)?;
        save_model(&out.join(RECOGNIZER_FILE), &model)?;
        println!("saved {}", out.join(RECOGNIZER_FILE).display());
    }
    if everything || matches!(evolution, Some(EvolutionArg::Cgmr)) {
        let model = train_conditional_evolution(&cfg.spec, &train, &cfg.evolution)?;
        save_model(&out.join(CONDITIONAL_FILE), &model)?;
        println!("saved {}", out.join(CONDITIONAL_FILE).display());
    }
    if everything || matches!(evolution, Some(EvolutionArg::Ggmr)) {
        let model = train_pooled_evolution(&train, &cfg.evolution)?;
        save_model(&out.join(POOLED_FILE), &model)?;
        println!("saved {}", out.join(POOLED_FILE).display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => {
            let ds = generate_dataset(&cfg.spec, &cfg.dataset, cfg.seed)?;
            fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
            for (name, split) in [("train", &ds.train), ("validation", &ds.validation), ("test", &ds.test)] {
                let path = cli.out.join(format!("{name}.csv"));
                export_csv(&path, split)?;
                println!("{}: {} trajectories", path.display(), split.len());
            }
        }
        Command::Train {
            recognizer,
            evolution,
            data,
        } => train(&cfg, &cli.out, *recognizer, *evolution, data.as_deref())?,
        Command::Track { models, model_dir } => {
            let cfg = with_models(cfg, models, model_dir.clone());
            let report = run_experiment(&cfg)?;
            print_mae(&report);
        }
        Command::Predict {
            horizon,
            models,
            model_dir,
        } => {
            let mut cfg = with_models(cfg, models, model_dir.clone());
            cfg.prediction.horizon = *horizon;
            cfg.validate()?;
            let report = run_prediction(&cfg)?;
            if report.rows.is_empty() {
                println!("no prediction origin fits the test trajectories");
                return Ok(());
            }
            println!("{:<6} {:>10} {:>8}", "model", "ADE", "origins");
            for r in &report.rows {
                println!("{:<6} {:>10.4} {:>8}", r.model.name(), r.ade, r.origins);
            }
        }
        Command::Compare { model_dir } => {
            let mut cfg = with_models(cfg, &[], model_dir.clone());
            cfg.models = ScenarioConfig::default().models;
            let report = run_experiment(&cfg)?;
            print_mae(&report);
        }
        Command::Scenario { kind, seeds } => {
            let kind = match kind {
                ScenarioArg::Occlusion => ScenarioKind::Occlusion,
                ScenarioArg::BirthDeath => ScenarioKind::BirthDeath,
                ScenarioArg::Crossing => ScenarioKind::Crossing,
            };
            let first = cli.seed.unwrap_or(0);
            let outcomes = (first..first + seeds)
                .map(|s| run_scenario(kind, s, &cfg.tracker))
                .collect::<cmsmc::error::Result<Vec<_>>>()?;
            let passed = outcomes.iter().filter(|o| o.passed()).count();
            fs::create_dir_all(&cli.out)?;
            let path = cli.out.join(format!("scenario-{}.json", kind.name()));
            let body = serde_json::json!({ "scenario": kind.name(), "passed": passed, "runs": outcomes });
            fs::write(&path, serde_json::to_string_pretty(&body)?)?;
            println!("{}: {passed}/{} seeds passed ({})", kind.name(), outcomes.len(), path.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::Divergence { .. }) => 3,
        Some(
            Error::InvalidConfig(_) | Error::Schema(_) | Error::VersionMismatch { .. } | Error::MissingColumn(_),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
