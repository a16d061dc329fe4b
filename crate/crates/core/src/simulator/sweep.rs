//! Robustness sweep over shifted channel rates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::PlanLibrary;

use super::{run_trial, Mode, ObjectSource, ObservationSource, PlanChoice, Resources, ScenarioConfig, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    /// Correct motion labels over all ticks of all trials.
    pub mc_accuracy: f64,
    /// Per-trial plan-recognition accuracy, averaged over trials.
    pub pr_accuracy: f64,
}

/// Seed of one sweep trial, distinct for every (base, delta, plan, trial).
pub fn sweep_trial_seed(base: u64, delta_index: usize, plan: usize, trial: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((delta_index as u64) << 40)
        ^ ((plan as u64) << 20)
        ^ trial as u64
}

/// For each delta, runs `trials_per_plan` predictive trials per plan with
/// channel-corrupted motions and perfect objects.
pub fn run_sweep(
    base: &ScenarioConfig,
    library: &PlanLibrary,
    deltas: &[f64],
    trials_per_plan: usize,
) -> Result<Vec<SweepRow>, SimError> {
    if trials_per_plan == 0 {
        return Err(SimError::Config("trials per plan must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(deltas.len());
    for (di, &delta) in deltas.iter().enumerate() {
        let mut config = base.clone();
        config.observation = ObservationSource::Channel;
        config.objects = ObjectSource::Perfect;
        config.delta = delta;
        config.validate(library)?;
        let jobs: Vec<(usize, usize)> = (0..library.plans().len())
            .flat_map(|p| (0..trials_per_plan).map(move |t| (p, t)))
            .collect();
        let results: Result<Vec<(f64, usize, usize)>, SimError> = jobs
            .par_iter()
            .map(|&(plan, trial)| {
                let mut c = config.clone();
                c.plan = PlanChoice::Fixed(plan);
                c.seed = sweep_trial_seed(base.seed, di, plan, trial);
                let trace = run_trial(&c, library, Mode::Predictive, false, &Resources::default())?;
                let acc = &trace.summary.accuracy;
                let mc_hits = trace
                    .records
                    .iter()
                    .filter(|r| r.est_motion == r.true_action.motion)
                    .count();
                Ok((acc.pr_accuracy.unwrap_or(0.0), mc_hits, acc.ticks))
            })
            .collect();
        let results = results?;
        let pr = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        let hits: usize = results.iter().map(|r| r.1).sum();
        let ticks: usize = results.iter().map(|r| r.2).sum();
        log::info!("delta {delta}: pr {pr:.4}");
        rows.push(SweepRow {
            delta,
            mc_accuracy: hits as f64 / ticks as f64,
            pr_accuracy: pr,
        });
    }
    Ok(rows)
}
