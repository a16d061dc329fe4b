//! Tick-based collaboration world: a synthetic human executes a plan while
//! the robot follows one of three policies, with configurable observation
//! noise. Every trial is seeded and bit-reproducible.

mod human;
mod metrics;
mod robot;
mod sweep;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{CostTable, LocalCost, StepPattern};
use crate::domain::{Action, MotionId, ObjectId, PlanId, PlanLibrary, RobotStepId};
use crate::motion::{ConfusionChannel, Lstm, MotionError, PAPER_RATES};
use crate::objects::{ObjectFilter, ValueModel, ValueWeights};
use crate::planner::{BufferedStep, Decision, Planner, PlannerEvent, DEFAULT_THRESHOLD};
use crate::plans::{correct_action, ObservedActionLog, PlanBelief, PlanRecognizer, DEFAULT_LAMBDA_D};
use crate::trajectory::{TrajectoryModel, TrajectoryPredictor, DEFAULT_FORGETTING};

pub use human::{
    handover_point, human_tasks, motion_dataset, synthetic_run, trajectory_dataset, HumanTask, HumanTiming, PlanSwitch,
    SyntheticHuman, HUMAN_REST,
};
pub use metrics::{edit_distance, measure_accuracy, AccuracySummary};
pub use robot::{
    detour, proximity_check, AdversarialScenario, ConstantVelocity, ProximityReport, ProximitySample, RobotArm,
    WristForecaster, ROBOT_HOME,
};
pub use sweep::{run_sweep, sweep_trial_seed, SweepRow};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("trial did not finish within {0} s")]
    Timeout(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Robot policy: the plan-recognition level of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Starts a robot step once its triggering human action is done.
    Reactive,
    /// Knows the true plan and the human's position in it.
    Oracle,
    /// Runs plan recognition and the planner every tick.
    Predictive,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Reactive, Mode::Oracle, Mode::Predictive];

    /// 0 = reactive, 1 = oracle, 2 = predictive.
    pub fn level(self) -> u8 {
        match self {
            Mode::Reactive => 0,
            Mode::Oracle => 1,
            Mode::Predictive => 2,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Reactive => "reactive",
            Mode::Oracle => "oracle",
            Mode::Predictive => "predictive",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reactive" | "0" => Ok(Mode::Reactive),
            "oracle" | "1" => Ok(Mode::Oracle),
            "predictive" | "2" => Ok(Mode::Predictive),
            other => Err(format!("unknown mode `{other}` (reactive, oracle, predictive)")),
        }
    }
}

/// Fixed plan id or the keyword `"random"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanChoice {
    Fixed(usize),
    Keyword(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSource {
    /// True motion labels.
    Perfect,
    /// True labels corrupted by a confusion channel.
    Channel,
    /// A trained classifier over pose windows.
    Classifier,
}

/// How often the confusion channel draws a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One draw per human action, held for its duration.
    Action,
    /// A fresh draw every tick.
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectSource {
    Perfect,
    /// Bayesian goal inference from the wrist track.
    Filter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Plan library file; the built-in desktop library when absent.
    pub library: Option<PathBuf>,
    pub plan: PlanChoice,
    pub switch: Option<PlanSwitch>,
    /// Seconds per human action, by motion name.
    pub human_durations: BTreeMap<String, f64>,
    /// Seconds per robot action, by motion name.
    pub robot_durations: BTreeMap<String, f64>,
    /// Tick length, seconds.
    pub dt: f64,
    pub observation: ObservationSource,
    pub granularity: Granularity,
    /// Channel true-positive rates by motion name.
    pub rates: BTreeMap<String, f64>,
    /// Additive shift of every rate, percentage points.
    pub delta: f64,
    pub objects: ObjectSource,
    /// Local alignment cost of two actions on the same object with different
    /// motions; 1 gives the plain 0/1 cost.
    pub same_object_cost: f64,
    pub threshold: f64,
    pub lambda_d: f64,
    pub seed: u64,
    /// Wrist noise, meters.
    pub wrist_sigma: f64,
    /// Finger velocity noise, m/s.
    pub finger_sigma: f64,
    pub beta: f64,
    pub alpha_dist: f64,
    pub alpha_head: f64,
    pub object_stickiness: f64,
    /// Meters.
    pub safe_radius: f64,
    /// End-effector speed limit, m/s.
    pub robot_speed: f64,
    /// Predicted wrist samples used for avoidance when no trajectory model is given.
    pub forecast_horizon: usize,
    pub forgetting: f64,
    pub classifier_window: usize,
    /// Seconds a blocked human waits before asking for the tool.
    pub request_after: f64,
    /// Seconds before a trial is abandoned.
    pub max_time: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let human = [("fetching", 8.0), ("receiving", 2.0), ("screwing", 8.0), ("taping", 8.0)];
        ScenarioConfig {
            library: None,
            plan: PlanChoice::Keyword("random".into()),
            switch: None,
            human_durations: human.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            robot_durations: [("delivering".to_string(), 7.0)].into_iter().collect(),
            dt: 0.1,
            observation: ObservationSource::Perfect,
            granularity: Granularity::Tick,
            rates: PAPER_RATES.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            delta: 0.0,
            objects: ObjectSource::Perfect,
            same_object_cost: 1.0,
            threshold: DEFAULT_THRESHOLD,
            lambda_d: DEFAULT_LAMBDA_D,
            seed: 0,
            wrist_sigma: 0.005,
            finger_sigma: 0.01,
            beta: 5.0,
            alpha_dist: 1.0,
            alpha_head: 1.0,
            object_stickiness: 0.8,
            safe_radius: 0.15,
            robot_speed: 0.5,
            forecast_horizon: 10,
            forgetting: DEFAULT_FORGETTING,
            classifier_window: 10,
            request_after: 3.0,
            max_time: 600.0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn bad(msg: impl Into<String>) -> SimError {
        SimError::Config(msg.into())
    }

    pub fn validate(&self, library: &PlanLibrary) -> Result<(), SimError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Self::bad(format!("dt must be positive, got {}", self.dt)));
        }
        for m in library.human_motions() {
            let name = &library.motions()[m.0].name;
            match self.human_durations.get(name) {
                Some(&d) if d.is_finite() && d > 0.0 => {}
                Some(&d) => return Err(Self::bad(format!("duration of `{name}` must be positive, got {d}"))),
                None => return Err(Self::bad(format!("missing human duration for `{name}`"))),
            }
        }
        for plan in library.plans() {
            for s in &plan.robot_steps {
                let name = &library.motions()[s.action.motion.0].name;
                match self.robot_durations.get(name) {
                    Some(&d) if d.is_finite() && d > 0.0 => {}
                    _ => return Err(Self::bad(format!("robot duration for `{name}` missing or not positive"))),
                }
            }
        }
        let n_plans = library.plans().len();
        match &self.plan {
            PlanChoice::Fixed(p) if *p >= n_plans => {
                return Err(Self::bad(format!("plan {p} out of range (library has {n_plans})")))
            }
            PlanChoice::Keyword(k) if k != "random" => {
                return Err(Self::bad(format!("plan must be an id or \"random\", got `{k}`")))
            }
            _ => {}
        }
        if let Some(sw) = self.switch {
            if sw.to_plan.0 >= n_plans {
                return Err(Self::bad(format!("switch target {} out of range", sw.to_plan.0)));
            }
            let len = library.plans().iter().map(|p| p.reference.len()).min().unwrap_or(0);
            if sw.after_actions == 0 || sw.after_actions >= len {
                return Err(Self::bad(format!("switch index {} outside 1..{len}", sw.after_actions)));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Self::bad(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if !(self.lambda_d.is_finite() && self.lambda_d > 0.0) {
            return Err(Self::bad(format!("lambda_d must be positive, got {}", self.lambda_d)));
        }
        self.channel_rates(library)?;
        let positive = [
            ("safe_radius", self.safe_radius),
            ("robot_speed", self.robot_speed),
            ("request_after", self.request_after),
            ("max_time", self.max_time),
            ("beta", self.beta),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Self::bad(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("wrist_sigma", self.wrist_sigma), ("finger_sigma", self.finger_sigma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Self::bad(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.same_object_cost > 0.0 && self.same_object_cost <= 1.0) {
            return Err(Self::bad("same_object_cost must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.object_stickiness) {
            return Err(Self::bad("object_stickiness must lie in [0, 1)"));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Self::bad("forgetting must lie in (0, 1]"));
        }
        if self.classifier_window == 0 {
            return Err(Self::bad("classifier_window must be at least 1"));
        }
        Ok(())
    }

    /// Shifted channel rates over the library's human motions.
    pub fn channel_rates(&self, library: &PlanLibrary) -> Result<(Vec<MotionId>, Vec<f64>), SimError> {
        let table: Vec<(&str, f64)> = self.rates.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        ConfusionChannel::rates_for(library, &table, self.delta).map_err(|e| Self::bad(e.to_string()))
    }

    /// Local cost over actions implied by `same_object_cost`.
    pub fn local_cost(&self, library: &PlanLibrary) -> Result<LocalCost<Action>, SimError> {
        if self.same_object_cost >= 1.0 {
            return Ok(LocalCost::Discrete01);
        }
        let bad = |e: crate::alignment::AlignmentError| SimError::Config(e.to_string());
        let mut table = CostTable::new(1.0).map_err(bad)?;
        let feasible: Vec<Action> = (0..library.n_motions())
            .flat_map(|m| (0..library.n_objects()).map(move |o| Action::new(m, o)))
            .filter(|&a| library.is_feasible(a))
            .collect();
        for &a in &feasible {
            for &b in &feasible {
                if a != b && a.object == b.object {
                    table.set(a, b, self.same_object_cost).map_err(bad)?;
                }
            }
        }
        Ok(LocalCost::Table(table))
    }

    fn human_timing(&self, library: &PlanLibrary) -> HumanTiming {
        HumanTiming {
            durations: library
                .motions()
                .iter()
                .map(|m| self.human_durations.get(&m.name).copied().unwrap_or(f64::NAN))
                .collect(),
        }
    }

    fn robot_duration_table(&self, library: &PlanLibrary) -> Vec<f64> {
        library
            .motions()
            .iter()
            .map(|m| self.robot_durations.get(&m.name).copied().unwrap_or(f64::NAN))
            .collect()
    }
}

/// Trained models a trial may use.
#[derive(Debug, Clone, Default)]
pub struct Resources {
    pub classifier: Option<Lstm>,
    pub trajectory: Option<TrajectoryModel>,
}

/// One tick of a trial; positions are at the end of the tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    /// End of the tick, seconds.
    pub time: f64,
    pub true_plan: PlanId,
    pub true_action: Action,
    /// Actions started so far, including the current one.
    pub executed: usize,
    pub est_motion: MotionId,
    pub est_object: ObjectId,
    pub est_feasible: bool,
    pub a_post: Option<Action>,
    pub posterior: Option<Vec<f64>>,
    pub est_plan: Option<PlanId>,
    pub plan_correct: Option<bool>,
    pub decision: Option<Decision>,
    pub doing: Option<RobotStepId>,
    pub buffer: Vec<RobotStepId>,
    pub recovering: bool,
    pub events: Vec<PlannerEvent>,
    pub human_waiting: bool,
    pub handover: bool,
    pub safety_stop: bool,
    pub human_wrist: [f64; 3],
    pub robot_position: [f64; 3],
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub mode: Mode,
    pub prediction: bool,
    pub seed: u64,
    pub initial_plan: PlanId,
    pub final_plan: PlanId,
    pub completion_time: f64,
    pub ticks: usize,
    pub accuracy: AccuracySummary,
    pub recoveries: usize,
    /// Robot steps in completion order.
    pub robot_sequence: Vec<RobotStepId>,
    /// Minimum distance and violations outside handovers.
    pub proximity: ProximityReport,
    pub safety_stops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub records: Vec<TickRecord>,
    pub summary: TrialSummary,
}

impl SimTrace {
    /// Writes one JSON object per tick.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let path = path.as_ref();
        let io = |source| SimError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        std::fs::write(path, text + "\n").map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<TickRecord>, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        text.lines()
            .map(|l| serde_json::from_str(l).map_err(|e| SimError::Config(format!("{}: {e}", path.display()))))
            .collect()
    }

    /// Decisions taken in each tick, `None` when no belief existed.
    pub fn decisions(&self) -> Vec<Option<Decision>> {
        self.records.iter().map(|r| r.decision).collect()
    }
}

fn step_of(library: &PlanLibrary, id: RobotStepId) -> BufferedStep {
    let step = library
        .plans()
        .iter()
        .flat_map(|p| &p.robot_steps)
        .find(|s| s.id == id)
        .expect("step belongs to the library");
    BufferedStep {
        step: id,
        action: step.action,
    }
}

/// Every robot step the remaining human actions need or trigger, in order.
fn oracle_buffer(library: &PlanLibrary, human: &SyntheticHuman, completed: &[RobotStepId]) -> Vec<BufferedStep> {
    let mut out: Vec<BufferedStep> = Vec::new();
    for task in human.remaining() {
        let needed = task.needs.iter().map(|&id| step_of(library, id));
        for step in needed.chain(task.triggers.iter().copied()) {
            if !completed.contains(&step.step) && !out.contains(&step) {
                out.push(step);
            }
        }
    }
    out
}

struct MotionObserver {
    source: ObservationSource,
    granularity: Granularity,
    channel: Option<ConfusionChannel>,
    classifier: Option<Lstm>,
    window: Vec<Vec<f64>>,
    window_len: usize,
    held: Option<(usize, MotionId)>,
}

impl MotionObserver {
    fn observe(&mut self, truth: MotionId, action_index: usize, features: Vec<f64>) -> Result<MotionId, SimError> {
        match self.source {
            ObservationSource::Perfect => Ok(truth),
            ObservationSource::Channel => {
                let channel = self.channel.as_mut().expect("channel configured");
                match self.granularity {
                    Granularity::Tick => Ok(channel.corrupt(truth)),
                    Granularity::Action => match self.held {
                        Some((i, m)) if i == action_index => Ok(m),
                        _ => {
                            let m = channel.corrupt(truth);
                            self.held = Some((action_index, m));
                            Ok(m)
                        }
                    },
                }
            }
            ObservationSource::Classifier => {
                if self.window.is_empty() {
                    self.window = vec![features; self.window_len];
                } else {
                    self.window.remove(0);
                    self.window.push(features);
                }
                let model = self.classifier.as_ref().expect("classifier configured");
                Ok(model.classify(&self.window)?.0)
            }
        }
    }
}

/// Runs one trial to completion.
pub fn run_trial(
    config: &ScenarioConfig,
    library: &PlanLibrary,
    mode: Mode,
    prediction: bool,
    resources: &Resources,
) -> Result<SimTrace, SimError> {
    config.validate(library)?;
    if config.observation == ObservationSource::Classifier && resources.classifier.is_none() {
        return Err(SimError::Config("classifier observation needs a trained classifier".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let plan = match config.plan {
        PlanChoice::Fixed(p) => PlanId(p),
        PlanChoice::Keyword(_) => PlanId(master.random_range(0..library.plans().len())),
    };
    let mut pose_rng = ChaCha8Rng::seed_from_u64(master.random());
    let channel_seed: u64 = master.random();

    let dt = config.dt;
    let robot_table = config.robot_duration_table(library);
    let robot_duration = |a: Action| robot_table[a.motion.0];
    let mut human = SyntheticHuman::new(library, plan, config.human_timing(library), config.switch);
    let mut planner = Planner::new(config.threshold).map_err(|e| SimError::Config(e.to_string()))?;
    let recognizer = PlanRecognizer::new(config.lambda_d, config.local_cost(library)?, StepPattern::symmetric())
        .map_err(|e| SimError::Config(e.to_string()))?;
    let mut observer = MotionObserver {
        source: config.observation,
        granularity: config.granularity,
        channel: match config.observation {
            ObservationSource::Channel => {
                let (motions, rates) = config.channel_rates(library)?;
                Some(ConfusionChannel::new(motions, rates, channel_seed)?)
            }
            _ => None,
        },
        classifier: resources.classifier.clone(),
        window: Vec::new(),
        window_len: config.classifier_window,
        held: None,
    };
    let weights = vec![
        ValueWeights {
            alpha_dist: config.alpha_dist,
            alpha_head: config.alpha_head,
        };
        library.n_motions()
    ];
    let value = ValueModel::new(config.beta, weights).map_err(|e| SimError::Config(e.to_string()))?;
    let mut filter = ObjectFilter::new(
        crate::objects::TransitionModels::from_library(library, config.object_stickiness),
        value,
        library.objects().iter().map(|o| o.position).collect(),
    );
    let mut forecaster: Option<Box<dyn WristForecaster>> = match (prediction, &resources.trajectory) {
        (false, _) => None,
        (true, Some(model)) => Some(Box::new(
            TrajectoryPredictor::new(model.clone(), config.forgetting).map_err(|e| SimError::Config(e.to_string()))?,
        )),
        (true, None) => Some(Box::new(ConstantVelocity {
            horizon: config.forecast_horizon,
        })),
    };
    let forecast_actions = resources
        .trajectory
        .as_ref()
        .map(|m| m.actions().to_vec())
        .unwrap_or_else(|| library.human_actions());
    let mut forecast_action = forecast_actions[0];

    let mut arm = RobotArm::new(ROBOT_HOME, config.robot_speed);
    let mut log = ObservedActionLog::new();
    let mut belief: Option<PlanBelief> = None;
    let mut pending_triggers: Vec<BufferedStep> = Vec::new();
    let mut track: Vec<[f64; 3]> = Vec::new();
    let mut records: Vec<TickRecord> = Vec::new();
    let mut robot_sequence = Vec::new();
    let mut safety_stops = 0;
    let is_receiving =
        |a: Action| library.motions().get(a.motion.0).is_some_and(|m| m.name == "receiving");

    for tick in 0usize.. {
        let t = tick as f64 * dt;
        if t > config.max_time {
            return Err(SimError::Timeout(config.max_time));
        }
        let task = human.current().expect("loop ends when the human is done").clone();
        let truth = task.action;
        let executed = human.performed().len() + 1;
        let pose = human.pose(library, t, dt, &mut pose_rng, config.wrist_sigma, config.finger_sigma);
        track.push(pose.wrist);

        let est_motion = observer.observe(truth.motion, executed, pose.features())?;
        let est_object = match config.objects {
            ObjectSource::Perfect => truth.object,
            ObjectSource::Filter => filter.observe(pose.wrist, pose.timestamp, est_motion).argmax(),
        };
        let est_action = Action {
            motion: est_motion,
            object: est_object,
        };
        let est_feasible = library.is_feasible(est_action);
        if est_feasible && forecast_actions.contains(&est_action) {
            forecast_action = est_action;
        }

        let mut decision = None;
        let mut a_post = None;
        let mut est_plan = None;
        match mode {
            Mode::Predictive => {
                if est_feasible {
                    let before = log.len();
                    if let Err(e) = log.append(library, est_motion, est_object, t) {
                        log::debug!("dropped observation at t={t:.1}: {e}");
                    }
                    if log.len() != before {
                        belief = Some(
                            recognizer
                                .infer(&log, library)
                                .map_err(|e| SimError::Config(e.to_string()))?,
                        );
                    }
                } else {
                    log::debug!("dropped infeasible estimate {est_action} at t={t:.1}");
                }
                if let Some(b) = &belief {
                    a_post = Some(correct_action(b, library));
                    est_plan = Some(b.top());
                    decision = Some(planner.decide(b, library));
                }
            }
            Mode::Oracle => {
                planner.set_buffer(oracle_buffer(library, &human, planner.completed()));
                est_plan = Some(human.plan());
                a_post = Some(truth);
            }
            Mode::Reactive => {
                for step in pending_triggers.drain(..) {
                    planner.enqueue(step);
                }
            }
        }
        if human.is_blocked(planner.completed()) && human.waited() >= config.request_after - 1e-9 {
            for &need in &task.needs {
                if !planner.completed().contains(&need) {
                    planner.request(step_of(library, need));
                }
            }
        }
        let mut events = planner.reconcile();

        let human_waiting = human.is_blocked(planner.completed());
        if let Some(done) = human.advance(library, dt, planner.completed()) {
            if mode == Mode::Reactive {
                pending_triggers.extend(done.triggers.iter().copied());
            }
        }

        let handover = is_receiving(truth);
        let obstacles: Vec<[f64; 3]> = match forecaster.as_mut() {
            Some(f) => {
                let mut pts = vec![pose.wrist];
                pts.extend(f.forecast(&track, forecast_action));
                pts
            }
            None => Vec::new(),
        };
        let safety_stop = forecaster.is_none()
            && !handover
            && crate::domain::distance(&arm.position(), &pose.wrist) < config.safe_radius;
        for e in &events {
            match e {
                PlannerEvent::Started { .. } => arm.begin_task(),
                PlannerEvent::RecoveryStarted { .. } => {
                    arm.begin_recovery(planner.recovering().map_or(0.0, |r| r.remaining))
                }
                _ => {}
            }
        }
        if safety_stop {
            safety_stops += 1;
        } else {
            let tick_events = planner.tick(dt, &robot_duration);
            for e in &tick_events {
                match e {
                    PlannerEvent::Finished { step } => robot_sequence.push(*step),
                    PlannerEvent::Started { .. } => arm.begin_task(),
                    _ => {}
                }
            }
            events.extend(tick_events);
            let nominal = arm.nominal(&planner, library, &robot_duration);
            let radius = if handover { 0.0 } else { config.safe_radius };
            arm.step(nominal, &obstacles, radius, dt);
        }

        let plan_correct = est_plan.map(|g| {
            g == human.plan() || {
                let prefix: Vec<Action> = records_prefix(&human, executed);
                library.plans_with_prefix(&prefix).contains(&g)
            }
        });
        let wrist = human.wrist();
        let robot_position = arm.position();
        records.push(TickRecord {
            tick,
            time: (tick + 1) as f64 * dt,
            true_plan: human.plan(),
            true_action: truth,
            executed,
            est_motion,
            est_object,
            est_feasible,
            a_post,
            posterior: belief.as_ref().filter(|_| mode == Mode::Predictive).map(|b| b.posterior.clone()),
            est_plan,
            plan_correct,
            decision,
            doing: planner.doing().map(|d| d.step.step),
            buffer: planner.buffer().map(|s| s.step).collect(),
            recovering: planner.recovering().is_some(),
            events,
            human_waiting,
            handover,
            safety_stop,
            human_wrist: wrist,
            robot_position,
            distance: crate::domain::distance(&wrist, &robot_position),
        });
        if human.is_done() {
            break;
        }
    }

    let last = records.last().expect("at least one tick");
    let proximity = proximity_check(
        records
            .iter()
            .filter(|r| !r.handover)
            .map(|r| (r.human_wrist, r.robot_position)),
        config.safe_radius,
    );
    let summary = TrialSummary {
        mode,
        prediction,
        seed: config.seed,
        initial_plan: plan,
        final_plan: human.plan(),
        completion_time: last.time,
        ticks: records.len(),
        accuracy: measure_accuracy(&records),
        recoveries: planner.recoveries(),
        robot_sequence,
        proximity,
        safety_stops,
    };
    Ok(SimTrace { records, summary })
}

/// Executed prefix as of the tick's start: performed actions plus the
/// current one (`executed` actions in total).
fn records_prefix(human: &SyntheticHuman, executed: usize) -> Vec<Action> {
    let mut prefix: Vec<Action> = human.performed().iter().map(|t| t.action).collect();
    prefix.extend(human.remaining().iter().map(|t| t.action));
    prefix.truncate(executed);
    prefix
}
