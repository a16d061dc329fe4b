//! Synthetic human: executes a plan's reference actions with minimum-jerk
//! reaches and motion-specific finger signatures.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Action, HumanPose, PlanId, PlanLibrary, RobotStepId, SubtaskId};
use crate::motion::LabeledWindow;
use crate::planner::BufferedStep;
use crate::trajectory::{min_jerk, TrajectoryWindow};

/// Resting wrist position in front of the human.
pub const HUMAN_REST: [f64; 3] = [0.15, 0.0, 0.15];
/// Fraction of the rest-to-object distance at which tools change hands.
pub const HANDOVER_FRACTION: f64 = 0.6;
const FINGER_POINTS: usize = 6;

/// Where the human meets the robot to take `object`.
pub fn handover_point(object: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| HUMAN_REST[i] + HANDOVER_FRACTION * (object[i] - HUMAN_REST[i]))
}

/// One human action on the true plan's timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanTask {
    pub action: Action,
    pub subtask: SubtaskId,
    /// Position within the subtask.
    pub local: usize,
    /// Robot steps this action waits for.
    pub needs: Vec<RobotStepId>,
    /// Robot steps triggered when this action completes.
    pub triggers: Vec<BufferedStep>,
}

/// Tasks of `plan` in reference order.
pub fn human_tasks(library: &PlanLibrary, plan: PlanId) -> Vec<HumanTask> {
    let plan = library.plan(plan);
    let mut tasks = Vec::with_capacity(plan.reference.len());
    for &sid in &plan.subtask_order {
        let subtask = &library.subtasks()[sid.0];
        for local in 0..subtask.human_actions.len() {
            let index = tasks.len();
            tasks.push(HumanTask {
                action: plan.reference[index],
                subtask: sid,
                local,
                needs: plan.blockers_of(index).map(|s| s.id).collect(),
                triggers: plan
                    .robot_steps
                    .iter()
                    .filter(|s| s.trigger == index)
                    .map(|s| BufferedStep {
                        step: s.id,
                        action: s.action,
                    })
                    .collect(),
            });
        }
    }
    tasks
}

/// Human action durations in seconds, by motion.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanTiming {
    /// Indexed by motion id.
    pub durations: Vec<f64>,
}

impl HumanTiming {
    pub fn duration(&self, action: Action) -> f64 {
        self.durations[action.motion.0]
    }
}

/// Switch to `to_plan` once `after_actions` actions are complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSwitch {
    pub after_actions: usize,
    pub to_plan: PlanId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHuman {
    plan: PlanId,
    tasks: Vec<HumanTask>,
    done: Vec<HumanTask>,
    /// Seconds since the current action began, including waiting.
    elapsed: f64,
    /// Seconds of actual progress on the current action.
    progress: f64,
    /// Seconds blocked on the robot during the current action.
    waited: f64,
    action_start: [f64; 3],
    wrist: [f64; 3],
    prev_wrist: [f64; 3],
    switch: Option<PlanSwitch>,
    timing: HumanTiming,
}

impl SyntheticHuman {
    pub fn new(library: &PlanLibrary, plan: PlanId, timing: HumanTiming, switch: Option<PlanSwitch>) -> Self {
        SyntheticHuman {
            plan,
            tasks: human_tasks(library, plan),
            done: Vec::new(),
            elapsed: 0.0,
            progress: 0.0,
            waited: 0.0,
            action_start: HUMAN_REST,
            wrist: HUMAN_REST,
            prev_wrist: HUMAN_REST,
            switch,
            timing,
        }
    }

    /// Plan the human currently follows.
    pub fn plan(&self) -> PlanId {
        self.plan
    }

    pub fn current(&self) -> Option<&HumanTask> {
        self.tasks.first()
    }

    pub fn remaining(&self) -> &[HumanTask] {
        &self.tasks
    }

    pub fn performed(&self) -> &[HumanTask] {
        &self.done
    }

    pub fn is_done(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Seconds the current action has been blocked on the robot.
    pub fn waited(&self) -> f64 {
        self.waited
    }

    /// Noise-free wrist position at the start of the current tick.
    pub fn wrist(&self) -> [f64; 3] {
        self.wrist
    }

    /// Actions started so far, including the current one.
    pub fn executed_prefix(&self) -> Vec<Action> {
        self.done.iter().chain(self.tasks.first()).map(|t| t.action).collect()
    }

    /// Whether the current action can progress given completed robot steps.
    pub fn is_blocked(&self, completed: &[RobotStepId]) -> bool {
        self.current()
            .is_some_and(|t| t.needs.iter().any(|s| !completed.contains(s)))
    }

    /// Pose sample for the tick starting at `time`.
    pub fn pose(&self, library: &PlanLibrary, time: f64, dt: f64, rng: &mut ChaCha8Rng, wrist_sigma: f64, finger_sigma: f64) -> HumanPose {
        let wrist_noise = Normal::new(0.0, wrist_sigma.max(0.0)).expect("finite sigma");
        let finger_noise = Normal::new(0.0, finger_sigma.max(0.0)).expect("finite sigma");
        let wrist = std::array::from_fn(|i| self.wrist[i] + wrist_noise.sample(rng));
        let velocity: [f64; 3] = std::array::from_fn(|i| (self.wrist[i] - self.prev_wrist[i]) / dt);
        let mut fingers = self.finger_signature(library, velocity);
        for f in &mut fingers {
            *f += finger_noise.sample(rng);
        }
        HumanPose {
            wrist,
            finger_velocities: fingers,
            timestamp: time,
        }
    }

    fn finger_signature(&self, library: &PlanLibrary, velocity: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; FINGER_POINTS];
        let Some(task) = self.current() else {
            return out;
        };
        let phase = self.elapsed;
        match library.motions()[task.action.motion.0].name.as_str() {
            "fetching" => {
                for i in 0..3 {
                    out[i] = 0.5 * velocity[i];
                    out[i + 3] = 0.5 * velocity[i];
                }
            }
            "receiving" => {
                out[2] = 0.05;
                out[5] = 0.05;
            }
            "screwing" => {
                let (s, c) = (TAU * 2.0 * phase).sin_cos();
                out[..3].copy_from_slice(&[0.1 * c, 0.1 * s, 0.0]);
                out[3..].copy_from_slice(&[-0.1 * c, -0.1 * s, 0.0]);
            }
            "taping" => {
                let s = 0.08 * (TAU * phase).sin();
                out[0] = s;
                out[3] = s;
                out[4] = 0.04;
            }
            _ => {}
        }
        out
    }

    /// Noise-free wrist target of the current action at its elapsed time.
    fn profile(&self, library: &PlanLibrary, elapsed: f64) -> [f64; 3] {
        let Some(task) = self.current() else {
            return self.wrist;
        };
        let object = library.object_position(task.action.object);
        let duration = self.timing.duration(task.action);
        let name = library.motions()[task.action.motion.0].name.as_str();
        let reach = (0.4 * duration).clamp(1.0, 3.0);
        match name {
            "receiving" => min_jerk(&self.action_start, &handover_point(object), elapsed / 1.5),
            "fetching" => {
                if elapsed <= reach {
                    min_jerk(&self.action_start, &object, elapsed / reach)
                } else {
                    let back = (duration - reach).max(1e-9);
                    min_jerk(&object, &handover_point(object), (elapsed - reach) / back)
                }
            }
            "screwing" => {
                let base = min_jerk(&self.action_start, &object, elapsed / reach);
                let r = if elapsed > reach { 0.01 } else { 0.0 };
                let (s, c) = (TAU * 2.0 * elapsed).sin_cos();
                [base[0] + r * c, base[1] + r * s, base[2]]
            }
            "taping" => {
                let base = min_jerk(&self.action_start, &object, elapsed / reach);
                let a = if elapsed > reach { 0.02 } else { 0.0 };
                [base[0], base[1] + a * (TAU * elapsed).sin(), base[2]]
            }
            _ => min_jerk(&self.action_start, &object, elapsed / reach),
        }
    }

    /// Advances by `dt` seconds. Progress requires every needed robot step
    /// to be complete at the start of the tick. Returns the action finished
    /// during this tick, if any.
    pub fn advance(&mut self, library: &PlanLibrary, dt: f64, completed: &[RobotStepId]) -> Option<HumanTask> {
        let task = self.current()?.clone();
        let blocked = self.is_blocked(completed);
        self.elapsed += dt;
        if blocked {
            self.waited += dt;
        } else {
            self.progress += dt;
        }
        self.prev_wrist = self.wrist;
        let duration = self.timing.duration(task.action);
        // Blocked receiving keeps reaching toward the handover point.
        let profile_time = if library.motions()[task.action.motion.0].name == "receiving" {
            self.elapsed
        } else {
            self.progress
        };
        self.wrist = self.profile(library, profile_time);
        if self.progress + 1e-9 < duration {
            return None;
        }
        let finished = self.tasks.remove(0);
        self.done.push(finished.clone());
        self.elapsed = 0.0;
        self.progress = 0.0;
        self.waited = 0.0;
        self.action_start = self.wrist;
        if let Some(sw) = self.switch {
            if self.done.len() == sw.after_actions && sw.to_plan != self.plan {
                self.switch_to(library, sw.to_plan);
            }
        }
        Some(finished)
    }

    /// Remaining actions become the new reference minus performed actions.
    fn switch_to(&mut self, library: &PlanLibrary, plan: PlanId) {
        let done: Vec<(SubtaskId, usize)> = self.done.iter().map(|t| (t.subtask, t.local)).collect();
        self.plan = plan;
        self.tasks = human_tasks(library, plan)
            .into_iter()
            .filter(|t| !done.contains(&(t.subtask, t.local)))
            .collect();
    }
}

/// Durations used when generating training data.
fn training_timing(library: &PlanLibrary) -> HumanTiming {
    HumanTiming {
        durations: library
            .motions()
            .iter()
            .map(|m| if m.name == "receiving" { 2.0 } else { 8.0 })
            .collect(),
    }
}

/// Track of one unobstructed run through a random plan: (pose, true action).
pub fn synthetic_run(library: &PlanLibrary, seed: u64, dt: f64, wrist_sigma: f64, finger_sigma: f64) -> Vec<(HumanPose, Action)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = PlanId(rng.random_range(0..library.plans().len()));
    let mut human = SyntheticHuman::new(library, plan, training_timing(library), None);
    let all: Vec<RobotStepId> = library.plan(plan).robot_steps.iter().map(|s| s.id).collect();
    let mut out = Vec::new();
    let mut k = 0usize;
    while let Some(task) = human.current() {
        let action = task.action;
        let pose = human.pose(library, k as f64 * dt, dt, &mut rng, wrist_sigma, finger_sigma);
        out.push((pose, action));
        human.advance(library, dt, &all);
        k += 1;
    }
    out
}

/// Balanced classifier windows: `per_class` windows of `window` samples for
/// every human motion, labelled by the motion at the window's last sample.
pub fn motion_dataset(library: &PlanLibrary, per_class: usize, window: usize, seed: u64, wrist_sigma: f64, finger_sigma: f64) -> Vec<LabeledWindow> {
    let motions = library.human_motions();
    let mut buckets: Vec<Vec<LabeledWindow>> = vec![Vec::new(); motions.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for run in 0..10_000u64 {
        if buckets.iter().all(|b| b.len() >= per_class) {
            break;
        }
        let track = synthetic_run(library, seed.wrapping_add(run), 0.1, wrist_sigma, finger_sigma);
        let feats: Vec<Vec<f64>> = track.iter().map(|(p, _)| p.features()).collect();
        for end in window..=track.len() {
            // Subsample to decorrelate neighbouring windows.
            if rng.random::<f64>() > 0.15 {
                continue;
            }
            let label = track[end - 1].1.motion;
            let Some(c) = motions.iter().position(|&m| m == label) else {
                continue;
            };
            if buckets[c].len() < per_class {
                buckets[c].push(LabeledWindow {
                    features: feats[end - window..end].to_vec(),
                    label,
                });
            }
        }
    }
    buckets.into_iter().flatten().collect()
}

/// Wrist prediction windows sampled from synthetic runs.
pub fn trajectory_dataset(
    library: &PlanLibrary,
    count: usize,
    history: usize,
    horizon: usize,
    seed: u64,
    wrist_sigma: f64,
) -> Vec<TrajectoryWindow> {
    let mut out = Vec::with_capacity(count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = 0u64;
    while out.len() < count {
        let track = synthetic_run(library, seed.wrapping_add(run), 0.1, wrist_sigma, 0.0);
        run += 1;
        let wrists: Vec<[f64; 3]> = track.iter().map(|(p, _)| p.wrist).collect();
        for end in history..track.len().saturating_sub(horizon) {
            if out.len() >= count {
                break;
            }
            if rng.random::<f64>() > 0.2 {
                continue;
            }
            out.push(TrajectoryWindow {
                history: wrists[end - history..end].to_vec(),
                action: track[end - 1].1,
                future: wrists[end..end + horizon].to_vec(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::distance;

    fn lib() -> PlanLibrary {
        PlanLibrary::desktop()
    }

    fn timing(lib: &PlanLibrary) -> HumanTiming {
        training_timing(lib)
    }

    #[test]
    fn tasks_follow_reference_and_blockers() {
        let lib = lib();
        let tasks = human_tasks(&lib, PlanId(0));
        let reference = &lib.plan(PlanId(0)).reference;
        assert_eq!(tasks.iter().map(|t| t.action).collect::<Vec<_>>(), *reference);
        assert_eq!(tasks[0].triggers.len(), 1);
        assert_eq!(tasks[1].needs, vec![tasks[0].triggers[0].step]);
        assert!(tasks[2].needs.is_empty());
    }

    #[test]
    fn durations_are_respected_without_blocking() {
        let lib = lib();
        let mut h = SyntheticHuman::new(&lib, PlanId(0), timing(&lib), None);
        let all: Vec<RobotStepId> = lib.plan(PlanId(0)).robot_steps.iter().map(|s| s.id).collect();
        let mut ticks = 0;
        let mut finished_at = Vec::new();
        while !h.is_done() {
            ticks += 1;
            if h.advance(&lib, 0.1, &all).is_some() {
                finished_at.push(ticks);
            }
        }
        assert_eq!(finished_at[..3], [80, 100, 180]);
        assert_eq!(ticks, 3 * 180);
    }

    #[test]
    fn blocked_action_waits_for_robot() {
        let lib = lib();
        let mut h = SyntheticHuman::new(&lib, PlanId(0), timing(&lib), None);
        for _ in 0..80 {
            h.advance(&lib, 0.1, &[]);
        }
        assert_eq!(h.performed().len(), 1);
        for _ in 0..50 {
            assert!(h.advance(&lib, 0.1, &[]).is_none());
        }
        assert!((h.waited() - 5.0).abs() < 1e-9);
        let r1 = h.current().unwrap().needs.clone();
        let mut n = 0;
        while h.advance(&lib, 0.1, &r1).is_none() {
            n += 1;
        }
        assert_eq!(n + 1, 20);
    }

    #[test]
    fn reach_ends_at_target() {
        let lib = lib();
        let mut h = SyntheticHuman::new(&lib, PlanId(0), timing(&lib), None);
        for _ in 0..30 {
            h.advance(&lib, 0.1, &[]);
        }
        let fan = lib.object_position(crate::domain::ObjectId(0));
        assert!(distance(&h.wrist(), &fan) < 1e-9);
    }

    #[test]
    fn switch_keeps_performed_actions_out() {
        let lib = lib();
        let target = lib
            .plans()
            .iter()
            .find(|p| p.id != PlanId(0) && p.subtask_order[0] == lib.plan(PlanId(0)).subtask_order[0])
            .unwrap()
            .id;
        let sw = PlanSwitch {
            after_actions: 4,
            to_plan: target,
        };
        let mut h = SyntheticHuman::new(&lib, PlanId(0), timing(&lib), Some(sw));
        let all: Vec<RobotStepId> = lib.plans().iter().flat_map(|p| p.robot_steps.iter().map(|s| s.id)).collect();
        while h.performed().len() < 4 {
            h.advance(&lib, 0.1, &all);
        }
        assert_eq!(h.plan(), target);
        let mut seq: Vec<Action> = h.performed().iter().map(|t| t.action).collect();
        seq.extend(h.remaining().iter().map(|t| t.action));
        assert_eq!(seq.len(), 9);
        let mut sorted_seq = seq.clone();
        sorted_seq.sort();
        let mut sorted_ref = lib.plan(target).reference.clone();
        sorted_ref.sort();
        assert_eq!(sorted_seq, sorted_ref);
    }

    #[test]
    fn motion_dataset_is_balanced() {
        let lib = lib();
        let data = motion_dataset(&lib, 20, 10, 3, 0.005, 0.01);
        for m in lib.human_motions() {
            assert_eq!(data.iter().filter(|w| w.label == m).count(), 20);
        }
        assert!(data.iter().all(|w| w.features.len() == 10 && w.features[0].len() == 9));
    }

    #[test]
    fn runs_are_seeded() {
        let lib = lib();
        let a = synthetic_run(&lib, 5, 0.1, 0.01, 0.01);
        let b = synthetic_run(&lib, 5, 0.1, 0.01, 0.01);
        assert_eq!(a, b);
    }
}
