//! Experiment orchestration for the collaboration simulator: completion-time
//! comparison across robot policies, the channel-noise robustness sweep,
//! threshold sensitivity and offline model training.
//!
//! Every experiment computes its full result in memory before anything is
//! written, so a failing run leaves no partial output behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use hrc_core::alignment::StepPattern;
use hrc_core::domain::{LibraryError, PlanLibrary};
use hrc_core::motion::{train_classifier, MotionError, TrainConfig};
use hrc_core::planner::Decision;
use hrc_core::simulator::{
    motion_dataset, run_sweep, run_trial, trajectory_dataset, Mode, PlanChoice, Resources, ScenarioConfig, SimError,
    SweepRow,
};
use hrc_core::trajectory::{train_trajectory_model, TrajectoryConfig, TrajectoryError};

/// Channel shifts of the robustness sweep, percentage points.
pub const DEFAULT_DELTAS: [f64; 8] = [0.0, -5.0, -10.0, -15.0, -20.0, -30.0, -40.0, -45.0];
pub const DEFAULT_THRESHOLD_GRID: [f64; 7] = [0.58, 0.60, 0.62, 0.64, 0.66, 0.68, 0.70];
pub const DEFAULT_EFFICIENCY_TRIALS: usize = 24;
pub const DEFAULT_TRIALS_PER_PLAN: usize = 15;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("no results to write: {0}")]
    Empty(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Whether the failure comes from bad input rather than from running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_) | ExperimentError::Library(_) | ExperimentError::Sim(SimError::Config(_))
        )
    }
}

/// The configured library, or the built-in desktop assembly.
pub fn load_library(config: &ScenarioConfig) -> Result<PlanLibrary, ExperimentError> {
    match &config.library {
        Some(path) => Ok(PlanLibrary::load(path)?),
        None => Ok(PlanLibrary::desktop()),
    }
}

/// Named output files held in memory until the experiment succeeds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outputs {
    pub files: Vec<(String, String)>,
}

impl Outputs {
    pub fn push(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    /// Writes every file into `dir`, creating it if needed. Files are written
    /// under a temporary name and renamed once all of them are on disk.
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ExperimentError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, contents) in &self.files {
            let tmp = dir.join(format!(".{name}.partial"));
            if let Err(e) = std::fs::write(&tmp, contents).map_err(io(&tmp)) {
                for (t, _) in &staged {
                    let _ = std::fs::remove_file(t);
                }
                return Err(e);
            }
            staged.push((tmp, dir.join(name)));
        }
        for (tmp, dest) in staged {
            std::fs::rename(&tmp, &dest).map_err(io(&dest))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
struct Metadata<'a> {
    command: &'a str,
    parameters: serde_json::Value,
    config: &'a ScenarioConfig,
    library: LibraryInfo,
    step_pattern: StepPattern,
    local_cost: String,
    value_model: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
struct LibraryInfo {
    source: String,
    motions: Vec<String>,
    objects: Vec<String>,
    plans: Vec<String>,
    prior: Vec<f64>,
}

/// Every setting a run used, including the built-in defaults.
pub fn metadata(
    command: &str,
    parameters: serde_json::Value,
    config: &ScenarioConfig,
    library: &PlanLibrary,
) -> String {
    let cost = if config.same_object_cost >= 1.0 {
        "0/1 on (motion, object)".to_string()
    } else {
        format!("0/1 on (motion, object), same object {}", config.same_object_cost)
    };
    let meta = Metadata {
        command,
        parameters,
        config,
        library: LibraryInfo {
            source: config
                .library
                .as_ref()
                .map_or_else(|| "built-in desktop".to_string(), |p| p.display().to_string()),
            motions: library.motions().iter().map(|m| m.name.clone()).collect(),
            objects: library.objects().iter().map(|o| o.name.clone()).collect(),
            plans: library.plans().iter().map(|p| p.name()).collect(),
            prior: library.prior().to_vec(),
        },
        step_pattern: StepPattern::symmetric(),
        local_cost: cost,
        value_model: serde_json::json!({
            "beta": config.beta,
            "alpha_dist": config.alpha_dist,
            "alpha_head": config.alpha_head,
        }),
    };
    serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n"
}

/// Seed of trial `trial` in a group, independent of the group.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(trial as u64)
}

/// Completion time of one trial of an efficiency group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyTrial {
    pub mode: Mode,
    pub prediction: bool,
    pub trial: usize,
    pub seed: u64,
    pub plan: usize,
    pub completion_time: f64,
    pub recoveries: usize,
    pub min_distance: f64,
    pub safety_stops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyGroup {
    pub mode: Mode,
    pub prediction: bool,
    pub trials: usize,
    pub mean_time: f64,
    pub std_time: f64,
    pub mean_min_distance: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The six groups: every robot policy with and without trajectory prediction.
/// Trial `i` of every group uses the same seed, hence the same plan.
pub fn run_efficiency(
    config: &ScenarioConfig,
    library: &PlanLibrary,
    trials: usize,
    resources: &Resources,
) -> Result<(Vec<EfficiencyGroup>, Vec<EfficiencyTrial>), ExperimentError> {
    if trials == 0 {
        return Err(ExperimentError::Config("trials must be at least 1".into()));
    }
    config.validate(library)?;
    let jobs: Vec<(Mode, bool, usize)> = Mode::ALL
        .iter()
        .flat_map(|&m| [false, true].map(|p| (m, p)))
        .flat_map(|(m, p)| (0..trials).map(move |t| (m, p, t)))
        .collect();
    let rows: Result<Vec<EfficiencyTrial>, SimError> = jobs
        .par_iter()
        .map(|&(mode, prediction, trial)| {
            let mut c = config.clone();
            c.seed = trial_seed(config.seed, trial);
            let trace = run_trial(&c, library, mode, prediction, resources)?;
            let s = &trace.summary;
            Ok(EfficiencyTrial {
                mode,
                prediction,
                trial,
                seed: c.seed,
                plan: s.initial_plan.0,
                completion_time: s.completion_time,
                recoveries: s.recoveries,
                min_distance: s.proximity.min_distance,
                safety_stops: s.safety_stops,
            })
        })
        .collect();
    let rows = rows?;
    let groups = rows
        .chunks(trials)
        .map(|chunk| {
            let times: Vec<f64> = chunk.iter().map(|r| r.completion_time).collect();
            let (mean_time, std_time) = mean_std(&times);
            let dists: Vec<f64> = chunk.iter().map(|r| r.min_distance).collect();
            EfficiencyGroup {
                mode: chunk[0].mode,
                prediction: chunk[0].prediction,
                trials: chunk.len(),
                mean_time,
                std_time,
                mean_min_distance: mean_std(&dists).0,
            }
        })
        .collect();
    Ok((groups, rows))
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| ExperimentError::Config(format!("csv serialization: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ExperimentError::Config(format!("csv serialization: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct GroupCsvRow {
    mode: String,
    level: u8,
    prediction: u8,
    trials: usize,
    mean_time: String,
    std_time: String,
    mean_min_distance: String,
}

#[derive(Serialize)]
struct TrialCsvRow {
    mode: String,
    prediction: u8,
    trial: usize,
    seed: u64,
    plan: usize,
    completion_time: String,
    recoveries: usize,
    min_distance: String,
    safety_stops: usize,
}

pub fn efficiency_outputs(
    groups: &[EfficiencyGroup],
    trials: &[EfficiencyTrial],
) -> Result<Outputs, ExperimentError> {
    if groups.is_empty() || trials.is_empty() {
        return Err(ExperimentError::Empty("efficiency".into()));
    }
    let rows: Vec<GroupCsvRow> = groups
        .iter()
        .map(|g| GroupCsvRow {
            mode: g.mode.to_string(),
            level: g.mode.level(),
            prediction: g.prediction as u8,
            trials: g.trials,
            mean_time: format!("{:.4}", g.mean_time),
            std_time: format!("{:.4}", g.std_time),
            mean_min_distance: format!("{:.4}", g.mean_min_distance),
        })
        .collect();
    let trial_rows: Vec<TrialCsvRow> = trials
        .iter()
        .map(|t| TrialCsvRow {
            mode: t.mode.to_string(),
            prediction: t.prediction as u8,
            trial: t.trial,
            seed: t.seed,
            plan: t.plan,
            completion_time: format!("{:.4}", t.completion_time),
            recoveries: t.recoveries,
            min_distance: format!("{:.4}", t.min_distance),
            safety_stops: t.safety_stops,
        })
        .collect();
    let mut out = Outputs::default();
    out.push("efficiency.csv", csv_string(&rows)?);
    out.push("efficiency_trials.csv", csv_string(&trial_rows)?);
    Ok(out)
}

/// Human-readable table of the groups, mean ± std seconds.
pub fn efficiency_table(groups: &[EfficiencyGroup]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<11} {:>10} {:>20}", "mode", "prediction", "completion (s)");
    for g in groups {
        let _ = writeln!(
            s,
            "{:<11} {:>10} {:>11.2} ± {:<6.2}",
            g.mode.to_string(),
            g.prediction as u8,
            g.mean_time,
            g.std_time
        );
    }
    s
}

pub fn robustness_outputs(rows: &[SweepRow]) -> Result<Outputs, ExperimentError> {
    if rows.is_empty() {
        return Err(ExperimentError::Empty("robustness".into()));
    }
    let mut s = String::from("delta,mc_accuracy,pr_accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.delta, r.mc_accuracy, r.pr_accuracy);
    }
    let mut out = Outputs::default();
    out.push("robustness.csv", s);
    Ok(out)
}

pub fn run_robustness(
    config: &ScenarioConfig,
    library: &PlanLibrary,
    deltas: &[f64],
    trials_per_plan: usize,
) -> Result<Vec<SweepRow>, ExperimentError> {
    if deltas.is_empty() {
        return Err(ExperimentError::Config("no deltas given".into()));
    }
    if trials_per_plan == 0 {
        return Err(ExperimentError::Config("trials per plan must be at least 1".into()));
    }
    Ok(run_sweep(config, library, deltas, trials_per_plan)?)
}

/// Decisions of a noiseless predictive trial of every plan under one threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub plans: usize,
    /// Plans whose per-tick decisions equal those under the reference threshold.
    pub identical_plans: usize,
    /// Ticks whose decision differs, over all plans.
    pub differing_ticks: usize,
    pub mean_time: f64,
}

/// Per-tick decisions and completion time of one trial.
type DecisionRun = (Vec<Option<Decision>>, f64);

fn noiseless_decisions(
    config: &ScenarioConfig,
    library: &PlanLibrary,
    threshold: f64,
) -> Result<Vec<DecisionRun>, ExperimentError> {
    (0..library.plans().len())
        .into_par_iter()
        .map(|p| {
            let mut c = config.clone();
            c.plan = PlanChoice::Fixed(p);
            c.threshold = threshold;
            let trace = run_trial(&c, library, Mode::Predictive, false, &Resources::default())?;
            Ok((trace.decisions(), trace.summary.completion_time))
        })
        .collect()
}

/// Reruns the scenario of every plan for each threshold and compares its
/// decisions with those taken at `config.threshold`.
pub fn run_threshold(
    config: &ScenarioConfig,
    library: &PlanLibrary,
    grid: &[f64],
) -> Result<Vec<ThresholdRow>, ExperimentError> {
    if grid.is_empty() {
        return Err(ExperimentError::Config("empty threshold grid".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(ExperimentError::Config(format!("threshold {t} outside [0, 1]")));
    }
    config.validate(library)?;
    let reference = noiseless_decisions(config, library, config.threshold)?;
    grid.iter()
        .map(|&threshold| {
            let runs = noiseless_decisions(config, library, threshold)?;
            let mut identical = 0;
            let mut differing = 0;
            for ((got, _), (want, _)) in runs.iter().zip(&reference) {
                if got == want {
                    identical += 1;
                }
                let common = got.iter().zip(want).filter(|(a, b)| a != b).count();
                differing += common + got.len().abs_diff(want.len());
            }
            let times: Vec<f64> = runs.iter().map(|r| r.1).collect();
            Ok(ThresholdRow {
                threshold,
                plans: runs.len(),
                identical_plans: identical,
                differing_ticks: differing,
                mean_time: mean_std(&times).0,
            })
        })
        .collect()
}

pub fn threshold_outputs(rows: &[ThresholdRow]) -> Result<Outputs, ExperimentError> {
    if rows.is_empty() {
        return Err(ExperimentError::Empty("threshold".into()));
    }
    let mut s = String::from("threshold,plans,identical_plans,differing_ticks,mean_time\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:.2},{},{},{},{:.4}",
            r.threshold, r.plans, r.identical_plans, r.differing_ticks, r.mean_time
        );
    }
    let mut out = Outputs::default();
    out.push("threshold.csv", s);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub windows_per_class: usize,
    pub classifier: TrainConfig,
    pub trajectory_windows: usize,
    pub trajectory: TrajectoryConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            windows_per_class: 60,
            classifier: TrainConfig {
                hidden: 16,
                epochs: 40,
                ..TrainConfig::default()
            },
            trajectory_windows: 600,
            trajectory: TrajectoryConfig {
                epochs: 20,
                ..TrajectoryConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub classifier_loss: f64,
    pub classifier_train_accuracy: f64,
    pub classifier_heldout_accuracy: f64,
    pub trajectory_train_mse: f64,
    pub trajectory_heldout_mse: f64,
}

/// Trains the motion classifier and the trajectory model on synthetic
/// demonstrations; returns their checkpoints and a report.
pub fn run_train(
    config: &ScenarioConfig,
    library: &PlanLibrary,
    settings: &TrainSettings,
) -> Result<(Outputs, TrainSummary), ExperimentError> {
    if settings.windows_per_class == 0 || settings.trajectory_windows == 0 {
        return Err(ExperimentError::Config("training set sizes must be at least 1".into()));
    }
    let seed = config.seed;
    let (ws, fs) = (config.wrist_sigma, config.finger_sigma);
    let window = config.classifier_window;
    let train = motion_dataset(library, settings.windows_per_class, window, seed, ws, fs);
    let heldout = motion_dataset(library, settings.windows_per_class, window, seed.wrapping_add(1 << 32), ws, fs);
    let mut classifier_config = settings.classifier.clone();
    classifier_config.seed = classifier_config.seed.wrapping_add(seed);
    let report = train_classifier(&train, &classifier_config)?;
    let model = report.model;

    let tc = &settings.trajectory;
    let traj_train = trajectory_dataset(library, settings.trajectory_windows, tc.history, tc.horizon, seed, ws);
    let traj_heldout = trajectory_dataset(
        library,
        settings.trajectory_windows / 4 + 1,
        tc.history,
        tc.horizon,
        seed.wrapping_add(1 << 32),
        ws,
    );
    let traj = train_trajectory_model(&traj_train, library.human_actions(), tc)?.model;

    let summary = TrainSummary {
        classifier_loss: model.final_loss().unwrap_or(f64::NAN),
        classifier_train_accuracy: model.accuracy(&train)?,
        classifier_heldout_accuracy: model.accuracy(&heldout)?,
        trajectory_train_mse: traj.mse(&traj_train)?,
        trajectory_heldout_mse: traj.mse(&traj_heldout)?,
    };
    let mut out = Outputs::default();
    let ck = |c: &hrc_core::motion::Checkpoint| serde_json::to_string(c).expect("checkpoint serializes") + "\n";
    out.push("classifier.json", ck(&model.to_checkpoint()));
    out.push("trajectory.json", ck(&traj.to_checkpoint()));
    out.push(
        "train_report.json",
        serde_json::to_string_pretty(&summary).expect("report serializes") + "\n",
    );
    Ok((out, summary))
}

/// Loads trained models from checkpoint files.
pub fn load_resources(classifier: Option<&Path>, trajectory: Option<&Path>) -> Result<Resources, ExperimentError> {
    use hrc_core::motion::{Checkpoint, Lstm};
    use hrc_core::trajectory::TrajectoryModel;
    let mut res = Resources::default();
    if let Some(path) = classifier {
        res.classifier = Some(Lstm::from_checkpoint(&Checkpoint::load(path)?)?);
    }
    if let Some(path) = trajectory {
        res.trajectory = Some(TrajectoryModel::from_checkpoint(&Checkpoint::load(path)?)?);
    }
    Ok(res)
}

/// Plan-library lint: one line per finding, then the verdict.
pub fn validate_library(library: &PlanLibrary) -> (bool, String) {
    let n = library.plans().len();
    let mut report = String::new();
    let mut ok = n > 0;
    for plan in library.plans() {
        for a in &plan.reference {
            if !library.is_feasible(*a) {
                ok = false;
                let _ = writeln!(report, "plan {}: infeasible action {}", plan.name(), library.action_label(*a));
            }
        }
    }
    let prior_sum: f64 = library.prior().iter().sum();
    if (prior_sum - 1.0).abs() > 1e-9 {
        ok = false;
        let _ = writeln!(report, "prior sums to {prior_sum}");
    }
    let identifiable = library.identifiable();
    ok &= identifiable;
    let _ = writeln!(
        report,
        "{n} plans, {}",
        if identifiable { "identifiable" } else { "not identifiable" }
    );
    (ok, report)
}
