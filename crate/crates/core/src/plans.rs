//! Plan inference from the observed action stream and posterior action
//! correction.

use serde::{Deserialize, Serialize};

use crate::alignment::{open_end_dtw, AlignmentError, AlignmentResult, LocalCost, StepPattern};
use crate::domain::{Action, MotionId, ObjectId, PlanId, PlanLibrary};

pub const DEFAULT_LAMBDA_D: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("infeasible action {0}")]
    Infeasible(Action),
    #[error("action {0} is outside the library")]
    UnknownAction(Action),
    #[error("no actions observed yet")]
    EmptyLog,
    #[error("likelihood scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
}

/// One run of identical observed action labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub action: Action,
    pub count: usize,
    pub first_seen: f64,
    pub last_seen: f64,
}

/// Deduplicated observed action sequence `a_{1:k}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservedActionLog {
    entries: Vec<LogEntry>,
}

impl ObservedActionLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `(motion, object)` observed at `timestamp`, merging it into the
    /// last run when the label repeats.
    pub fn append(
        &mut self,
        library: &PlanLibrary,
        motion: MotionId,
        object: ObjectId,
        timestamp: f64,
    ) -> Result<(), PlanError> {
        let action = Action { motion, object };
        if motion.0 >= library.n_motions() || object.0 >= library.n_objects() {
            return Err(PlanError::UnknownAction(action));
        }
        if !library.is_feasible(action) {
            return Err(PlanError::Infeasible(action));
        }
        match self.entries.last_mut() {
            Some(last) if last.action == action => {
                last.count += 1;
                last.last_seen = timestamp;
            }
            _ => self.entries.push(LogEntry {
                action,
                count: 1,
                first_seen: timestamp,
                last_seen: timestamp,
            }),
        }
        Ok(())
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn actions(&self) -> Vec<Action> {
        self.entries.iter().map(|e| e.action).collect()
    }

    pub fn last(&self) -> Option<Action> {
        self.entries.last().map(|e| e.action)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Posterior over plans with the alignment that produced each likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanBelief {
    pub posterior: Vec<f64>,
    pub alignments: Vec<AlignmentResult>,
    /// More than one plan attains the maximum posterior.
    pub ambiguous: bool,
}

impl PlanBelief {
    /// Plan ids sorted by decreasing posterior, ties by increasing id.
    pub fn ranking(&self) -> Vec<PlanId> {
        let mut ids: Vec<usize> = (0..self.posterior.len()).collect();
        ids.sort_by(|&a, &b| self.posterior[b].total_cmp(&self.posterior[a]).then(a.cmp(&b)));
        ids.into_iter().map(PlanId).collect()
    }

    pub fn top(&self) -> PlanId {
        self.ranking()[0]
    }

    /// Best and second-best plans; the second is absent for single-plan libraries.
    pub fn top2(&self) -> (PlanId, Option<PlanId>) {
        let r = self.ranking();
        (r[0], r.get(1).copied())
    }

    pub fn probability(&self, plan: PlanId) -> f64 {
        self.posterior[plan.0]
    }

    /// Number of reference actions matched by the plan's alignment (`j*`).
    pub fn cursor(&self, plan: PlanId) -> usize {
        self.alignments[plan.0].matched_len
    }
}

/// Plan posterior `P(g | a_{1:k}) ∝ P(g) exp(-lambda_d * D_OE(a_{1:k}, R_g))`.
#[derive(Debug, Clone)]
pub struct PlanRecognizer {
    lambda_d: f64,
    cost: LocalCost<Action>,
    steps: StepPattern,
}

impl Default for PlanRecognizer {
    fn default() -> Self {
        PlanRecognizer {
            lambda_d: DEFAULT_LAMBDA_D,
            cost: LocalCost::Discrete01,
            steps: StepPattern::symmetric(),
        }
    }
}

impl PlanRecognizer {
    pub fn new(lambda_d: f64, cost: LocalCost<Action>, steps: StepPattern) -> Result<Self, PlanError> {
        if !(lambda_d.is_finite() && lambda_d > 0.0) {
            return Err(PlanError::InvalidScale(lambda_d));
        }
        Ok(PlanRecognizer { lambda_d, cost, steps })
    }

    pub fn with_lambda(lambda_d: f64) -> Result<Self, PlanError> {
        Self::new(lambda_d, LocalCost::Discrete01, StepPattern::symmetric())
    }

    pub fn lambda_d(&self) -> f64 {
        self.lambda_d
    }

    pub fn steps(&self) -> &StepPattern {
        &self.steps
    }

    pub fn infer(&self, log: &ObservedActionLog, library: &PlanLibrary) -> Result<PlanBelief, PlanError> {
        self.infer_sequence(&log.actions(), library)
    }

    /// Same as [`infer`](Self::infer) for an already deduplicated sequence.
    pub fn infer_sequence(&self, observed: &[Action], library: &PlanLibrary) -> Result<PlanBelief, PlanError> {
        if observed.is_empty() {
            return Err(PlanError::EmptyLog);
        }
        let alignments = library
            .plans()
            .iter()
            .map(|p| open_end_dtw(observed, &p.reference, &self.cost, &self.steps))
            .collect::<Result<Vec<_>, _>>()?;
        let log_weights: Vec<f64> = alignments
            .iter()
            .zip(library.prior())
            .map(|(a, &p)| p.ln() - self.lambda_d * a.distance)
            .collect();
        let posterior = normalize_log(&log_weights);
        let best = posterior.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ambiguous = posterior.iter().filter(|&&p| p >= best - 1e-12).count() > 1;
        Ok(PlanBelief {
            posterior,
            alignments,
            ambiguous,
        })
    }
}

/// Exponentiates and normalizes log weights; `-inf` entries get probability 0.
pub(crate) fn normalize_log(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Posterior action correction: the reference action at the matched
/// truncation point of the most probable plan.
pub fn correct_action(belief: &PlanBelief, library: &PlanLibrary) -> Action {
    let g = belief.top();
    library.plan(g).reference[belief.alignments[g.0].matched_end()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::dtw;
    use proptest::prelude::*;

    fn h(i: usize) -> Action {
        // H1..H9 of the desktop library.
        let lib = PlanLibrary::desktop();
        lib.plan(PlanId(0)).reference[i - 1]
    }

    fn belief_for(actions: &[Action]) -> PlanBelief {
        PlanRecognizer::default()
            .infer_sequence(actions, &PlanLibrary::desktop())
            .unwrap()
    }

    #[test]
    fn append_dedups_runs() {
        let lib = PlanLibrary::desktop();
        let mut log = ObservedActionLog::new();
        log.append(&lib, h(1).motion, h(1).object, 0.0).unwrap();
        assert_eq!(log.actions(), vec![h(1)]);
        log.append(&lib, h(1).motion, h(1).object, 0.1).unwrap();
        assert_eq!(log.actions(), vec![h(1)]);
        assert_eq!(log.entries()[0].count, 2);
        assert_eq!(log.entries()[0].last_seen, 0.1);
        log.append(&lib, h(2).motion, h(2).object, 0.2).unwrap();
        assert_eq!(log.actions(), vec![h(1), h(2)]);
    }

    #[test]
    fn append_rejects_infeasible_and_unknown() {
        let lib = PlanLibrary::desktop();
        let mut log = ObservedActionLog::new();
        // screwing the tape
        let err = log.append(&lib, MotionId(2), ObjectId(6), 0.0).unwrap_err();
        assert!(matches!(err, PlanError::Infeasible(_)));
        let err = log.append(&lib, MotionId(0), ObjectId(99), 0.0).unwrap_err();
        assert!(matches!(err, PlanError::UnknownAction(_)));
        assert!(log.is_empty());
    }

    #[test]
    fn empty_log_is_rejected() {
        let err = PlanRecognizer::default()
            .infer(&ObservedActionLog::new(), &PlanLibrary::desktop())
            .unwrap_err();
        assert_eq!(err, PlanError::EmptyLog);
        assert!(PlanRecognizer::with_lambda(0.0).is_err());
    }

    /// For a one-symbol query every path is a single column, so
    /// D_OE = min_j mismatches(R[..j]) / j.
    fn single_symbol_oracle(a: Action, reference: &[Action]) -> f64 {
        (1..=reference.len())
            .map(|j| reference[..j].iter().filter(|&&r| r != a).count() as f64 / j as f64)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn first_action_favors_cpu_fan_plans() {
        let lib = PlanLibrary::desktop();
        let b = belief_for(&[h(1)]);
        for (p, a) in lib.plans().iter().zip(&b.alignments) {
            assert!((a.distance - single_symbol_oracle(h(1), &p.reference)).abs() < 1e-12);
        }
        let best = b.posterior.iter().copied().fold(0.0, f64::max);
        let winners: Vec<usize> = (0..6).filter(|&g| (b.posterior[g] - best).abs() < 1e-12).collect();
        let cpu_first: Vec<usize> = lib
            .plans()
            .iter()
            .filter(|p| p.subtask_order[0].0 == 0)
            .map(|p| p.id.0)
            .collect();
        assert_eq!(winners, cpu_first);
        assert!(b.ambiguous);
        assert_eq!(b.top(), PlanId(0));
    }

    #[test]
    fn fetching_system_fan_after_cpu_fan_identifies_plan_one() {
        let b = belief_for(&[h(1), h(2), h(3), h(4)]);
        assert_eq!(b.top(), PlanId(0));
        assert!(!b.ambiguous);
        assert_eq!(PlanLibrary::desktop().plan(PlanId(0)).subtask_order.iter().map(|s| s.0).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn full_reference_is_unique_maximum() {
        let lib = PlanLibrary::desktop();
        for p in lib.plans() {
            let b = belief_for(&p.reference);
            assert_eq!(b.top(), p.id);
            assert!(!b.ambiguous);
            assert_eq!(b.alignments[p.id.0].distance, 0.0);
        }
    }

    #[test]
    fn correction_is_identity_on_noiseless_prefix() {
        let lib = PlanLibrary::desktop();
        for p in lib.plans() {
            for k in 1..=p.reference.len() {
                let b = belief_for(&p.reference[..k]);
                assert_eq!(correct_action(&b, &lib), p.reference[k - 1]);
            }
        }
    }

    #[test]
    fn correction_restores_current_action_after_corrupted_symbol() {
        let lib = PlanLibrary::desktop();
        let observed = [h(1), h(5), h(3), h(4)];
        let b = belief_for(&observed);
        // Oracle: scan every truncation of the top plan with plain DTW.
        let reference = &lib.plan(b.top()).reference;
        let mut best = (f64::INFINITY, 0);
        for j in 1..=reference.len() {
            let d = dtw(&observed, &reference[..j], &LocalCost::Discrete01, &StepPattern::symmetric())
                .unwrap()
                .distance;
            if d < best.0 - 1e-12 {
                best = (d, j);
            }
        }
        assert_eq!(b.cursor(b.top()), best.1);
        assert_eq!(correct_action(&b, &lib), h(4));
        assert_eq!(reference[best.1 - 1], h(4));
    }

    #[test]
    fn single_plan_library_corrects_into_its_reference() {
        let text = include_str!("../data/desktop.json");
        let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
        v["plans"] = serde_json::json!([{ "order": [2, 0, 1] }]);
        let lib = PlanLibrary::from_json(&v.to_string()).unwrap();
        let reference = lib.plan(PlanId(0)).reference.clone();
        for observed in [vec![h(1)], vec![h(9), h(2)], vec![h(5), h(5), h(7)]] {
            let b = PlanRecognizer::default().infer_sequence(&observed, &lib).unwrap();
            assert_eq!(b.posterior, vec![1.0]);
            assert!(reference.contains(&correct_action(&b, &lib)));
        }
    }

    #[test]
    fn noiseless_argmax_locks_on_after_distinguishing_action() {
        let lib = PlanLibrary::desktop();
        for p in lib.plans() {
            let distinguishing = (1..=p.reference.len())
                .find(|&k| lib.plans_with_prefix(&p.reference[..k]) == vec![p.id])
                .unwrap();
            for k in distinguishing..=p.reference.len() {
                let b = belief_for(&p.reference[..k]);
                assert_eq!(b.top(), p.id, "plan {} at k={k}", p.name());
                assert!(!b.ambiguous);
            }
        }
    }

    #[test]
    fn normalized_distance_lets_true_posterior_dip() {
        // A competitor's ratio falls as more of its own reference is matched,
        // so the true plan's posterior is not monotone even without noise.
        let lib = PlanLibrary::desktop();
        let r = &lib.plan(PlanId(0)).reference;
        let at5 = belief_for(&r[..5]).probability(PlanId(0));
        let at6 = belief_for(&r[..6]).probability(PlanId(0));
        assert!(at6 < at5);
        assert!(at6 > 0.99);
    }

    proptest! {
        #[test]
        fn posterior_invariant_to_prior_rescaling(
            raw in prop::collection::vec(0.05f64..1.0, 6),
            scale in 0.1f64..10.0,
            obs in prop::collection::vec(0usize..9, 1..6),
        ) {
            let base: serde_json::Value = serde_json::from_str(include_str!("../data/desktop.json")).unwrap();
            let lib_with = |weights: &[f64]| {
                let total: f64 = weights.iter().sum();
                let mut v = base.clone();
                v["prior"] = serde_json::json!(weights.iter().map(|w| w / total).collect::<Vec<_>>());
                PlanLibrary::from_json(&v.to_string()).unwrap()
            };
            let scaled: Vec<f64> = raw.iter().map(|w| w * scale).collect();
            let observed: Vec<Action> = obs.iter().map(|&i| h(i + 1)).collect();
            let r = PlanRecognizer::default();
            let a = r.infer_sequence(&observed, &lib_with(&raw)).unwrap();
            let b = r.infer_sequence(&observed, &lib_with(&scaled)).unwrap();
            for (x, y) in a.posterior.iter().zip(&b.posterior) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((a.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
