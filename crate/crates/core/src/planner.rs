//! Robot decision making from the plan posterior.
//!
//! Each tick the planner either commits to the remaining robot steps of the
//! most probable plan (posterior above threshold), commits to a single step
//! when the two most probable plans agree on it, or waits. The buffer keeps the
//! step in execution at its head; a commit whose head differs from the step in
//! execution triggers a recovery that undoes the elapsed work first.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::domain::{Action, PlanId, PlanLibrary, RobotStepId};
use crate::plans::PlanBelief;

pub const DEFAULT_THRESHOLD: f64 = 0.70;
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlannerError {
    #[error("threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("action finished while the robot is idle")]
    FinishedWhileIdle,
}

/// A robot step waiting in or at the head of the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferedStep {
    pub step: RobotStepId,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotTask {
    pub step: BufferedStep,
    /// Seconds spent on the task so far.
    pub elapsed: f64,
}

/// Undoing an aborted step: the robot spends the aborted step's elapsed time
/// again to return what it carried.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub step: BufferedStep,
    pub remaining: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "snake_case")]
pub enum Decision {
    /// Top plan above threshold; buffer replaced by its remaining steps.
    Commit { plan: PlanId },
    /// Top-2 plans agree on the next step; buffer replaced by that step.
    Agree { plan: PlanId, runner_up: PlanId },
    /// Top-2 plans disagree; buffer untouched.
    Wait,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PlannerEvent {
    Started { step: RobotStepId },
    Finished { step: RobotStepId },
    RecoveryStarted { step: RobotStepId, undo_seconds: f64 },
    RecoveryFinished { step: RobotStepId },
}

/// Robot steps of `plan` still to be executed when the human is at reference
/// index `cursor`: not yet completed and needed at or after the cursor.
pub fn next_action_sequence(
    library: &PlanLibrary,
    plan: PlanId,
    cursor: usize,
    completed: &[RobotStepId],
) -> Vec<BufferedStep> {
    library
        .plan(plan)
        .robot_steps
        .iter()
        .filter(|s| s.needed_at >= cursor && !completed.contains(&s.id))
        .map(|s| BufferedStep {
            step: s.id,
            action: s.action,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planner {
    threshold: f64,
    doing: Option<RobotTask>,
    buffer: VecDeque<BufferedStep>,
    recovering: Option<Recovery>,
    completed: Vec<RobotStepId>,
    /// Steps the human explicitly asked for; kept at the buffer front.
    requested: Vec<BufferedStep>,
    recoveries: usize,
}

impl Default for Planner {
    fn default() -> Self {
        Planner::new(DEFAULT_THRESHOLD).expect("default threshold is valid")
    }
}

impl Planner {
    pub fn new(threshold: f64) -> Result<Self, PlannerError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(PlannerError::InvalidThreshold(threshold));
        }
        Ok(Planner {
            threshold,
            doing: None,
            buffer: VecDeque::new(),
            recovering: None,
            completed: Vec::new(),
            requested: Vec::new(),
            recoveries: 0,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn doing(&self) -> Option<&RobotTask> {
        self.doing.as_ref()
    }

    pub fn recovering(&self) -> Option<&Recovery> {
        self.recovering.as_ref()
    }

    /// Full buffer, head first (the head is the step in execution once reconciled).
    pub fn buffer(&self) -> impl Iterator<Item = &BufferedStep> {
        self.buffer.iter()
    }

    /// Steps waiting behind the one in execution.
    pub fn queued(&self) -> Vec<BufferedStep> {
        let skip = match (&self.doing, self.buffer.front()) {
            (Some(d), Some(h)) if d.step == *h => 1,
            _ => 0,
        };
        self.buffer.iter().skip(skip).copied().collect()
    }

    pub fn completed(&self) -> &[RobotStepId] {
        &self.completed
    }

    pub fn recoveries(&self) -> usize {
        self.recoveries
    }

    pub fn is_idle(&self) -> bool {
        self.doing.is_none() && self.recovering.is_none()
    }

    /// Replaces the buffer, e.g. by a baseline policy that bypasses `decide`.
    pub fn set_buffer(&mut self, steps: Vec<BufferedStep>) {
        self.buffer = steps.into();
    }

    /// Appends a step unless it is already buffered or completed.
    pub fn enqueue(&mut self, step: BufferedStep) {
        if !self.buffer.contains(&step) && !self.completed.contains(&step.step) {
            self.buffer.push_back(step);
        }
    }

    /// A waiting human asks for `step`: it moves to the buffer front and stays
    /// there across later decisions until completed.
    pub fn request(&mut self, step: BufferedStep) {
        if self.completed.contains(&step.step) {
            return;
        }
        if !self.requested.contains(&step) {
            self.requested.push(step);
        }
        self.apply_requests();
    }

    fn apply_requests(&mut self) {
        let completed = &self.completed;
        self.requested.retain(|s| !completed.contains(&s.step));
        for step in self.requested.iter().rev() {
            self.buffer.retain(|s| s != step);
            self.buffer.push_front(*step);
        }
    }

    /// Decision step of the planning loop. Each plan's cursor is the
    /// reference index its alignment matched last.
    pub fn decide(&mut self, belief: &PlanBelief, library: &PlanLibrary) -> Decision {
        let (g1, g2) = belief.top2();
        let remaining = |g: PlanId| next_action_sequence(library, g, belief.cursor(g) - 1, &self.completed);
        let decision = if belief.probability(g1) > self.threshold {
            self.buffer = remaining(g1).into();
            Decision::Commit { plan: g1 }
        } else if let Some(g2) = g2 {
            match (remaining(g1).first(), remaining(g2).first()) {
                (Some(a), Some(b)) if a == b => {
                    self.buffer = VecDeque::from([*a]);
                    Decision::Agree { plan: g1, runner_up: g2 }
                }
                _ => Decision::Wait,
            }
        } else {
            Decision::Wait
        };
        self.apply_requests();
        decision
    }

    /// Aligns the step in execution with the buffer head, starting a recovery
    /// when a step with elapsed work is abandoned.
    pub fn reconcile(&mut self) -> Vec<PlannerEvent> {
        let mut events = Vec::new();
        let Some(head) = self.buffer.front().copied() else {
            return events;
        };
        match self.doing {
            Some(task) if task.step == head => {}
            Some(task) => {
                if task.elapsed > TIME_EPS {
                    // Undo anything still being undone, then this task.
                    let pending = self.recovering.map_or(0.0, |r| r.remaining);
                    self.recovering = Some(Recovery {
                        step: task.step,
                        remaining: pending + task.elapsed,
                    });
                    self.recoveries += 1;
                    events.push(PlannerEvent::RecoveryStarted {
                        step: task.step.step,
                        undo_seconds: task.elapsed,
                    });
                }
                self.start(head, &mut events);
            }
            None => self.start(head, &mut events),
        }
        events
    }

    fn start(&mut self, step: BufferedStep, events: &mut Vec<PlannerEvent>) {
        self.doing = Some(RobotTask { step, elapsed: 0.0 });
        events.push(PlannerEvent::Started { step: step.step });
    }

    /// Marks the step in execution complete and moves to the next buffered step.
    pub fn on_action_finished(&mut self) -> Result<Vec<PlannerEvent>, PlannerError> {
        let Some(task) = self.doing.take() else {
            log::error!("robot action finished while idle");
            return Err(PlannerError::FinishedWhileIdle);
        };
        let mut events = vec![PlannerEvent::Finished { step: task.step.step }];
        self.completed.push(task.step.step);
        self.buffer.retain(|s| s.step != task.step.step);
        self.requested.retain(|s| s.step != task.step.step);
        if let Some(next) = self.buffer.front().copied() {
            self.start(next, &mut events);
        }
        Ok(events)
    }

    /// Advances execution by `dt` seconds; `duration` gives each robot
    /// action's execution time.
    pub fn tick(&mut self, dt: f64, duration: &dyn Fn(Action) -> f64) -> Vec<PlannerEvent> {
        let mut events = Vec::new();
        let mut budget = dt;
        while budget > TIME_EPS {
            if let Some(r) = self.recovering.as_mut() {
                if r.remaining > budget + TIME_EPS {
                    r.remaining -= budget;
                    break;
                }
                budget -= r.remaining;
                events.push(PlannerEvent::RecoveryFinished { step: r.step.step });
                self.recovering = None;
                continue;
            }
            let Some(task) = self.doing.as_mut() else {
                break;
            };
            let left = duration(task.step.action) - task.elapsed;
            if left > budget + TIME_EPS {
                task.elapsed += budget;
                break;
            }
            budget -= left.max(0.0);
            task.elapsed += left.max(0.0);
            events.extend(self.on_action_finished().expect("a task is in progress"));
        }
        events
    }

    /// Fraction of the step in execution that is done.
    pub fn progress(&self, duration: &dyn Fn(Action) -> f64) -> Option<f64> {
        self.doing
            .map(|t| (t.elapsed / duration(t.step.action)).clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignmentResult;
    use crate::plans::PlanRecognizer;

    fn lib() -> PlanLibrary {
        PlanLibrary::desktop()
    }

    fn step(lib: &PlanLibrary, plan: usize, i: usize) -> BufferedStep {
        let s = &lib.plan(PlanId(plan)).robot_steps[i];
        BufferedStep {
            step: s.id,
            action: s.action,
        }
    }

    /// Belief with explicit posterior and per-plan cursors (1-based `j*`).
    fn belief(posterior: Vec<f64>, cursors: Vec<usize>) -> PlanBelief {
        let alignments = cursors
            .into_iter()
            .map(|j| AlignmentResult {
                distance: 0.0,
                cost: 0.0,
                weight: 1.0,
                matched_len: j,
                path: Vec::new(),
            })
            .collect();
        PlanBelief {
            posterior,
            alignments,
            ambiguous: false,
        }
    }

    #[test]
    fn commit_buffers_remaining_steps_of_top_plan() {
        let lib = lib();
        let mut p = Planner::default();
        // a_post = H4 under plan 1: j* = 4
        let b = belief(vec![0.71, 0.058, 0.058, 0.058, 0.058, 0.058], vec![4; 6]);
        assert_eq!(p.decide(&b, &lib), Decision::Commit { plan: PlanId(0) });
        let ids: Vec<String> = p.queued().iter().map(|s| s.step.to_string()).collect();
        assert_eq!(ids, ["R1.0", "R2.0"]);
        assert_eq!(p.queued(), vec![step(&lib, 0, 1), step(&lib, 0, 2)]);
    }

    #[test]
    fn agreement_buffers_single_step() {
        let lib = lib();
        let mut p = Planner::default();
        // After H1, plans 1 and 2 both need the screwdriver for the CPU fan next.
        let b = belief(vec![0.4, 0.4, 0.05, 0.05, 0.05, 0.05], vec![1; 6]);
        assert_eq!(
            p.decide(&b, &lib),
            Decision::Agree {
                plan: PlanId(0),
                runner_up: PlanId(1)
            }
        );
        assert_eq!(p.queued(), vec![step(&lib, 0, 0)]);
    }

    #[test]
    fn disagreement_waits_and_keeps_buffer() {
        let lib = lib();
        let mut p = Planner::default();
        p.set_buffer(vec![step(&lib, 0, 0)]);
        let before = p.clone();
        // After H3, plan 1 needs screwdriver B next and plan 2 the scissors.
        let b = belief(vec![0.4, 0.4, 0.05, 0.05, 0.05, 0.05], vec![3; 6]);
        assert_eq!(p.decide(&b, &lib), Decision::Wait);
        assert_eq!(p, before);
    }

    #[test]
    fn reconcile_recovers_abandoned_step() {
        let lib = lib();
        let mut p = Planner::default();
        p.set_buffer(vec![step(&lib, 0, 0)]);
        p.reconcile();
        p.tick(3.0, &|_| 7.0);
        p.set_buffer(vec![step(&lib, 0, 2)]);
        let events = p.reconcile();
        assert_eq!(
            events[0],
            PlannerEvent::RecoveryStarted {
                step: step(&lib, 0, 0).step,
                undo_seconds: 3.0
            }
        );
        assert_eq!(p.doing().unwrap().step, step(&lib, 0, 2));
        assert_eq!(p.recoveries(), 1);
        // Idempotent.
        let snapshot = p.clone();
        assert!(p.reconcile().is_empty());
        assert_eq!(p, snapshot);
        // Undo takes the elapsed 3 s, then R3 runs 7 s.
        let events = p.tick(3.0, &|_| 7.0);
        assert!(matches!(events[0], PlannerEvent::RecoveryFinished { .. }));
        assert_eq!(p.doing().unwrap().elapsed, 0.0);
        let events = p.tick(7.0, &|_| 7.0);
        assert_eq!(events[0], PlannerEvent::Finished { step: step(&lib, 0, 2).step });
        assert!(p.is_idle());
        assert_eq!(p.completed(), &[step(&lib, 0, 2).step]);
    }

    #[test]
    fn reconcile_keeps_matching_head_and_starts_when_idle() {
        let lib = lib();
        let mut p = Planner::default();
        p.set_buffer(vec![step(&lib, 0, 1)]);
        let events = p.reconcile();
        assert_eq!(events, vec![PlannerEvent::Started { step: step(&lib, 0, 1).step }]);
        p.tick(1.0, &|_| 7.0);
        let snapshot = p.clone();
        assert!(p.reconcile().is_empty());
        assert_eq!(p, snapshot);
    }

    #[test]
    fn switching_before_any_progress_is_not_a_recovery() {
        let lib = lib();
        let mut p = Planner::default();
        p.set_buffer(vec![step(&lib, 0, 0)]);
        p.reconcile();
        p.set_buffer(vec![step(&lib, 0, 1)]);
        p.reconcile();
        assert_eq!(p.recoveries(), 0);
        assert!(p.recovering().is_none());
    }

    #[test]
    fn finishing_pops_fifo() {
        let lib = lib();
        let mut p = Planner::default();
        p.set_buffer(vec![step(&lib, 0, 0), step(&lib, 0, 1), step(&lib, 0, 2)]);
        p.reconcile();
        p.on_action_finished().unwrap();
        assert_eq!(p.doing().unwrap().step, step(&lib, 0, 1));
        assert_eq!(p.queued(), vec![step(&lib, 0, 2)]);
        p.on_action_finished().unwrap();
        p.on_action_finished().unwrap();
        assert!(p.is_idle());
        let snapshot = p.clone();
        assert_eq!(p.on_action_finished().unwrap_err(), PlannerError::FinishedWhileIdle);
        assert_eq!(p, snapshot);
    }

    #[test]
    fn completed_steps_are_not_proposed_again() {
        let lib = lib();
        let all = next_action_sequence(&lib, PlanId(0), 0, &[]);
        assert_eq!(all.len(), 3);
        let rest = next_action_sequence(&lib, PlanId(0), 0, &[all[0].step]);
        assert_eq!(rest, all[1..].to_vec());
        // Human waiting at the handover still needs the step.
        assert_eq!(next_action_sequence(&lib, PlanId(0), 1, &[])[0], all[0]);
        assert_eq!(next_action_sequence(&lib, PlanId(0), 2, &[]), all[1..].to_vec());
    }

    #[test]
    fn requested_step_survives_later_commits() {
        let lib = lib();
        let mut p = Planner::default();
        p.request(step(&lib, 0, 0));
        let b = belief(vec![0.95, 0.01, 0.01, 0.01, 0.01, 0.01], vec![4; 6]);
        p.decide(&b, &lib);
        let ids: Vec<BufferedStep> = p.buffer().copied().collect();
        assert_eq!(ids, vec![step(&lib, 0, 0), step(&lib, 0, 1), step(&lib, 0, 2)]);
        p.reconcile();
        p.on_action_finished().unwrap();
        p.decide(&b, &lib);
        assert_eq!(p.buffer().next(), Some(&step(&lib, 0, 1)));
    }

    #[test]
    fn invalid_threshold_is_rejected() {
        assert!(Planner::new(1.5).is_err());
        assert!(Planner::new(-0.1).is_err());
    }

    /// Feeds each noiseless prefix of `plan` and finishes any step in
    /// execution instantly, returning the executed robot steps.
    fn emitted_sequence(lib: &PlanLibrary, plan: PlanId, threshold: f64) -> (Vec<RobotStepId>, Vec<Decision>) {
        let r = PlanRecognizer::default();
        let mut p = Planner::new(threshold).unwrap();
        let mut decisions = Vec::new();
        let reference = &lib.plan(plan).reference;
        for k in 1..=reference.len() {
            let b = r.infer_sequence(&reference[..k], lib).unwrap();
            decisions.push(p.decide(&b, lib));
            p.reconcile();
            while p.doing().is_some() {
                p.on_action_finished().unwrap();
            }
        }
        (p.completed().to_vec(), decisions)
    }

    #[test]
    fn noiseless_emission_equals_robot_reference_for_every_plan() {
        let lib = lib();
        for plan in lib.plans() {
            let want: Vec<RobotStepId> = plan.robot_steps.iter().map(|s| s.id).collect();
            let (got, _) = emitted_sequence(&lib, plan.id, DEFAULT_THRESHOLD);
            assert_eq!(got, want, "plan {}", plan.name());
        }
    }

    #[test]
    fn decisions_identical_across_threshold_range() {
        let lib = lib();
        for plan in lib.plans() {
            let (_, reference) = emitted_sequence(&lib, plan.id, 0.70);
            for t in [0.58, 0.60, 0.62, 0.64, 0.66, 0.68] {
                assert_eq!(emitted_sequence(&lib, plan.id, t).1, reference);
            }
        }
    }
}
