//! Accuracy metrics over a trial's tick records.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::domain::Action;

use super::TickRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub ticks: usize,
    /// Share of ticks whose plan estimate is consistent with the executed
    /// prefix; ticks without an estimate count as wrong. `None` when the
    /// trial never estimated a plan.
    pub pr_accuracy: Option<f64>,
    /// Share of ticks with the correct motion label.
    pub mc_accuracy: f64,
    /// Share of ticks whose raw (motion, object) estimate is the true action.
    pub action_accuracy: f64,
    /// Share of ticks whose corrected action is the true action.
    pub corrected_accuracy: Option<f64>,
    /// Deduplicated true action sequence.
    pub true_sequence: Vec<Action>,
    /// Deduplicated feasible raw estimates.
    pub raw_sequence: Vec<Action>,
    /// Deduplicated corrected actions.
    pub corrected_sequence: Vec<Action>,
    pub raw_edit_distance: usize,
    pub corrected_edit_distance: Option<usize>,
}

/// Levenshtein distance between two action sequences.
pub fn edit_distance(a: &[Action], b: &[Action]) -> usize {
    let (a, b) = (a.to_vec(), b.to_vec());
    strsim::generic_levenshtein(&a, &b)
}

fn share(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn measure_accuracy(records: &[TickRecord]) -> AccuracySummary {
    let n = records.len();
    let estimated = records.iter().any(|r| r.plan_correct.is_some());
    let pr_hits = records.iter().filter(|r| r.plan_correct == Some(true)).count();
    let mc_hits = records.iter().filter(|r| r.est_motion == r.true_action.motion).count();
    let raw_hits = records
        .iter()
        .filter(|r| r.est_motion == r.true_action.motion && r.est_object == r.true_action.object)
        .count();
    let corrected_any = records.iter().any(|r| r.a_post.is_some());
    let corrected_hits = records.iter().filter(|r| r.a_post == Some(r.true_action)).count();

    let true_sequence: Vec<Action> = records.iter().map(|r| r.true_action).dedup().collect();
    let raw_sequence: Vec<Action> = records
        .iter()
        .filter(|r| r.est_feasible)
        .map(|r| Action {
            motion: r.est_motion,
            object: r.est_object,
        })
        .dedup()
        .collect();
    let corrected_sequence: Vec<Action> = records.iter().filter_map(|r| r.a_post).dedup().collect();
    AccuracySummary {
        ticks: n,
        pr_accuracy: estimated.then(|| share(pr_hits, n)),
        mc_accuracy: share(mc_hits, n),
        action_accuracy: share(raw_hits, n),
        corrected_accuracy: corrected_any.then(|| share(corrected_hits, n)),
        raw_edit_distance: edit_distance(&raw_sequence, &true_sequence),
        corrected_edit_distance: corrected_any.then(|| edit_distance(&corrected_sequence, &true_sequence)),
        true_sequence,
        raw_sequence,
        corrected_sequence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_counts_operations() {
        let a = [Action::new(0, 0), Action::new(1, 2), Action::new(2, 0)];
        let b = [Action::new(0, 0), Action::new(2, 0)];
        assert_eq!(edit_distance(&a, &b), 1);
        assert_eq!(edit_distance(&a, &a), 0);
        assert_eq!(edit_distance(&[], &a), 3);
        let c = [Action::new(0, 0), Action::new(3, 2), Action::new(2, 0)];
        assert_eq!(edit_distance(&a, &c), 1);
    }
}
