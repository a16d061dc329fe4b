use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hrc_core::simulator::{run_trial, Mode, ScenarioConfig};
use hrc_experiments::{
    efficiency_outputs, efficiency_table, load_library, load_resources, metadata, robustness_outputs, run_efficiency,
    run_robustness, run_threshold, run_train, threshold_outputs, validate_library, ExperimentError, Outputs,
    TrainSettings, DEFAULT_DELTAS, DEFAULT_EFFICIENCY_TRIALS, DEFAULT_THRESHOLD_GRID, DEFAULT_TRIALS_PER_PLAN,
};

/// Human-robot collaboration experiments.
#[derive(Parser, Debug)]
#[command(name = "hrc", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario config (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one trial and write its trace.
    Run {
        /// reactive, oracle or predictive (or 0, 1, 2).
        #[arg(long, default_value = "predictive")]
        mode: Mode,
        /// Enable trajectory prediction for avoidance.
        #[arg(long)]
        prediction: bool,
        /// Classifier checkpoint, required for classifier observation.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Trajectory model checkpoint used when prediction is on.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Completion times of every robot policy with and without prediction.
    Efficiency {
        #[arg(long, default_value_t = DEFAULT_EFFICIENCY_TRIALS)]
        trials: usize,
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Plan-recognition accuracy under shifted motion-channel rates.
    Robustness {
        /// Comma-separated shifts in percentage points.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        deltas: Option<Vec<f64>>,
        #[arg(long, default_value_t = DEFAULT_TRIALS_PER_PLAN)]
        trials_per_plan: usize,
    },
    /// Planner decisions across a grid of commit thresholds.
    Threshold {
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',')]
        threshold_grid: Option<Vec<f64>>,
    },
    /// Train the motion classifier and the trajectory model.
    Train {
        #[arg(long)]
        windows_per_class: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        trajectory_windows: Option<usize>,
        #[arg(long)]
        trajectory_epochs: Option<usize>,
    },
    /// Check the plan library.
    Validate,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HRC_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(common: &Common) -> Result<ScenarioConfig, ExperimentError> {
    let mut config = match &common.config {
        Some(path) => ScenarioConfig::load(path).map_err(|e| match e {
            hrc_core::simulator::SimError::Io { path, source } => {
                ExperimentError::Config(format!("cannot read {}: {source}", path.display()))
            }
            other => other.into(),
        })?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn finish(mut outputs: Outputs, meta: String, common: &Common) -> Result<(), ExperimentError> {
    outputs.push("metadata.json", meta);
    outputs.write(&common.out)?;
    log::info!("wrote {} files to {}", outputs.files.len(), common.out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode, ExperimentError> {
    let common = &cli.common;
    let config = load_config(common)?;
    let library = load_library(&config)?;
    match cli.command {
        Command::Run {
            mode,
            prediction,
            classifier,
            trajectory,
        } => {
            let resources = load_resources(classifier.as_deref(), trajectory.as_deref())?;
            let trace = run_trial(&config, &library, mode, prediction, &resources)?;
            let mut out = Outputs::default();
            let mut jsonl = String::new();
            for r in &trace.records {
                jsonl.push_str(&serde_json::to_string(r).expect("record serializes"));
                jsonl.push('\n');
            }
            out.push("trace.jsonl", jsonl);
            out.push(
                "summary.json",
                serde_json::to_string_pretty(&trace.summary).expect("summary serializes") + "\n",
            );
            let s = &trace.summary;
            println!(
                "{} plan {} -> {}: {:.1} s, {} recoveries",
                mode,
                library.plan(s.initial_plan).name(),
                library.plan(s.final_plan).name(),
                s.completion_time,
                s.recoveries
            );
            let params = serde_json::json!({"mode": mode, "prediction": prediction});
            finish(out, metadata("run", params, &config, &library), common)?;
        }
        Command::Efficiency { trials, trajectory } => {
            let resources = load_resources(None, trajectory.as_deref())?;
            let (groups, rows) = run_efficiency(&config, &library, trials, &resources)?;
            let out = efficiency_outputs(&groups, &rows)?;
            print!("{}", efficiency_table(&groups));
            let params = serde_json::json!({"trials": trials});
            finish(out, metadata("efficiency", params, &config, &library), common)?;
        }
        Command::Robustness {
            deltas,
            trials_per_plan,
        } => {
            let deltas = deltas.unwrap_or_else(|| DEFAULT_DELTAS.to_vec());
            let rows = run_robustness(&config, &library, &deltas, trials_per_plan)?;
            let out = robustness_outputs(&rows)?;
            print!("{}", out.get("robustness.csv").unwrap_or_default());
            let params = serde_json::json!({"deltas": deltas, "trials_per_plan": trials_per_plan});
            finish(out, metadata("robustness", params, &config, &library), common)?;
        }
        Command::Threshold { threshold_grid } => {
            let grid = threshold_grid.unwrap_or_else(|| DEFAULT_THRESHOLD_GRID.to_vec());
            let rows = run_threshold(&config, &library, &grid)?;
            let out = threshold_outputs(&rows)?;
            print!("{}", out.get("threshold.csv").unwrap_or_default());
            let params = serde_json::json!({"threshold_grid": grid});
            finish(out, metadata("threshold", params, &config, &library), common)?;
        }
        Command::Train {
            windows_per_class,
            epochs,
            trajectory_windows,
            trajectory_epochs,
        } => {
            let mut settings = TrainSettings::default();
            if let Some(n) = windows_per_class {
                settings.windows_per_class = n;
            }
            if let Some(n) = epochs {
                settings.classifier.epochs = n;
            }
            if let Some(n) = trajectory_windows {
                settings.trajectory_windows = n;
            }
            if let Some(n) = trajectory_epochs {
                settings.trajectory.epochs = n;
            }
            let (out, summary) = run_train(&config, &library, &settings)?;
            println!(
                "classifier held-out accuracy {:.3}, trajectory held-out mse {:.6}",
                summary.classifier_heldout_accuracy, summary.trajectory_heldout_mse
            );
            let params = serde_json::to_value(&settings).expect("settings serialize");
            finish(out, metadata("train", params, &config, &library), common)?;
        }
        Command::Validate => {
            let (ok, report) = validate_library(&library);
            print!("{report}");
            if !ok {
                return Err(ExperimentError::Config("plan library failed validation".into()));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
