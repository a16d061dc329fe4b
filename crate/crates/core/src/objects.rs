//! Target object estimation with a recursive Bayes filter.
//!
//! For each candidate object `o_k` the update multiplies the motion model
//! `P(m_k | m_{k-1}, o_k)`, the Boltzmann pose likelihood `exp(beta * V(h_k; o_k))`
//! and the predicted prior `sum_{o_{k-1}} P(o_k | m_{k-1}, o_{k-1}) b(o_{k-1})`,
//! then normalizes. All arithmetic is done in log space.

use serde::{Deserialize, Serialize};

use crate::domain::{distance, MotionId, ObjectId, PlanLibrary};

const SPEED_EPS: f64 = 1e-6;
/// `ln(1e-300)`: below this total mass the belief is reset.
const LOG_UNDERFLOW: f64 = -690.775_527_898_213_7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectError {
    #[error("invalid transition table: {0}")]
    InvalidTable(String),
    #[error("invalid value model: {0}")]
    InvalidValueModel(String),
    #[error("belief has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Belief over target objects at step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBelief {
    pub probabilities: Vec<f64>,
    pub step: usize,
}

impl ObjectBelief {
    pub fn uniform(n_objects: usize) -> Self {
        ObjectBelief {
            probabilities: vec![1.0 / n_objects as f64; n_objects],
            step: 0,
        }
    }

    /// Most probable object, lowest id on ties.
    pub fn argmax(&self) -> ObjectId {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        ObjectId(best)
    }
}

/// `motion[o][m_prev][m] = P(m | m_prev, o)` and
/// `object[m_prev][o_prev][o] = P(o | m_prev, o_prev)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModels {
    motion: Vec<Vec<Vec<f64>>>,
    object: Vec<Vec<Vec<f64>>>,
}

fn check_simplex(row: &[f64], what: &str) -> Result<(), ObjectError> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(ObjectError::InvalidTable(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(ObjectError::InvalidTable(format!("{what} sums to {total}")));
    }
    Ok(())
}

impl TransitionModels {
    pub fn new(motion: Vec<Vec<Vec<f64>>>, object: Vec<Vec<Vec<f64>>>) -> Result<Self, ObjectError> {
        let n_o = motion.len();
        let n_m = object.len();
        if n_o == 0 || n_m == 0 {
            return Err(ObjectError::InvalidTable("empty table".into()));
        }
        for (o, slice) in motion.iter().enumerate() {
            if slice.len() != n_m {
                return Err(ObjectError::InvalidTable(format!("motion table for object {o} has {} rows", slice.len())));
            }
            for (mp, row) in slice.iter().enumerate() {
                if row.len() != n_m {
                    return Err(ObjectError::InvalidTable(format!("motion row ({o}, {mp}) has {} entries", row.len())));
                }
                check_simplex(row, &format!("P(m | m_prev={mp}, o={o})"))?;
            }
        }
        for (mp, slice) in object.iter().enumerate() {
            if slice.len() != n_o {
                return Err(ObjectError::InvalidTable(format!("object table for motion {mp} has {} rows", slice.len())));
            }
            for (op, row) in slice.iter().enumerate() {
                if row.len() != n_o {
                    return Err(ObjectError::InvalidTable(format!("object row ({mp}, {op}) has {} entries", row.len())));
                }
                check_simplex(row, &format!("P(o | m_prev={mp}, o_prev={op})"))?;
            }
        }
        Ok(TransitionModels { motion, object })
    }

    /// Sticky object transitions and motion bigrams from the library.
    ///
    /// Motion rows are Laplace-smoothed counts of consecutive motions over all
    /// plan references (each action also counts one self-transition, since
    /// labels persist across ticks), masked by the feasibility table for the
    /// conditioning object.
    pub fn from_library(library: &PlanLibrary, stickiness: f64) -> Self {
        let n_m = library.n_motions();
        let n_o = library.n_objects();
        let mut counts = vec![vec![1.0; n_m]; n_m];
        for plan in library.plans() {
            for pair in plan.reference.windows(2) {
                counts[pair[0].motion.0][pair[1].motion.0] += 1.0;
            }
            for a in &plan.reference {
                counts[a.motion.0][a.motion.0] += 1.0;
            }
        }
        let feas = library.feasibility();
        let motion = (0..n_o)
            .map(|o| {
                counts
                    .iter()
                    .map(|row| {
                        let masked: Vec<f64> = row
                            .iter()
                            .enumerate()
                            .map(|(m, c)| if feas[m][o] { *c } else { 0.0 })
                            .collect();
                        normalized_or_uniform(masked)
                    })
                    .collect()
            })
            .collect();
        let object = vec![sticky(n_o, stickiness); n_m];
        TransitionModels { motion, object }
    }

    pub fn n_objects(&self) -> usize {
        self.motion.len()
    }

    pub fn n_motions(&self) -> usize {
        self.object.len()
    }

    pub fn motion_prob(&self, motion: MotionId, prev: MotionId, object: ObjectId) -> f64 {
        self.motion[object.0][prev.0][motion.0]
    }

    pub fn object_prob(&self, object: ObjectId, prev_motion: MotionId, prev_object: ObjectId) -> f64 {
        self.object[prev_motion.0][prev_object.0][object.0]
    }
}

fn normalized_or_uniform(row: Vec<f64>) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.into_iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / row.len() as f64; row.len()]
    }
}

fn sticky(n: usize, stay: f64) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![1.0]];
    }
    let leave = (1.0 - stay) / (n - 1) as f64;
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { stay } else { leave }).collect())
        .collect()
}

/// Per-motion value weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueWeights {
    /// Per meter of wrist-to-object distance.
    pub alpha_dist: f64,
    /// Per unit cosine of heading alignment.
    pub alpha_head: f64,
}

impl Default for ValueWeights {
    fn default() -> Self {
        ValueWeights {
            alpha_dist: 1.0,
            alpha_head: 1.0,
        }
    }
}

/// Boltzmann policy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueModel {
    pub beta: f64,
    pub weights: Vec<ValueWeights>,
}

impl ValueModel {
    pub fn new(beta: f64, weights: Vec<ValueWeights>) -> Result<Self, ObjectError> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(ObjectError::InvalidValueModel(format!("beta {beta}")));
        }
        if weights
            .iter()
            .any(|w| !(w.alpha_dist.is_finite() && w.alpha_head.is_finite()))
        {
            return Err(ObjectError::InvalidValueModel("non-finite weight".into()));
        }
        Ok(ValueModel { beta, weights })
    }

    /// `beta = 5`, unit weights for every motion.
    pub fn uniform(n_motions: usize) -> Self {
        ValueModel {
            beta: 5.0,
            weights: vec![ValueWeights::default(); n_motions],
        }
    }

    /// `V(h; o) = -alpha_dist * |wrist - pos(o)| + alpha_head * cos(velocity, pos(o) - wrist)`.
    pub fn value(&self, wrist: &[f64; 3], velocity: &[f64; 3], target: &[f64; 3], motion: MotionId) -> f64 {
        let w = self.weights.get(motion.0).copied().unwrap_or_default();
        let d = distance(wrist, target);
        -w.alpha_dist * d + w.alpha_head * heading_cosine(wrist, velocity, target)
    }

    pub fn log_likelihood(&self, wrist: &[f64; 3], velocity: &[f64; 3], target: &[f64; 3], motion: MotionId) -> f64 {
        self.beta * self.value(wrist, velocity, target, motion)
    }

    pub fn likelihood(&self, wrist: &[f64; 3], velocity: &[f64; 3], target: &[f64; 3], motion: MotionId) -> f64 {
        self.log_likelihood(wrist, velocity, target, motion).exp()
    }
}

fn heading_cosine(wrist: &[f64; 3], velocity: &[f64; 3], target: &[f64; 3]) -> f64 {
    let speed = velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
    let to: Vec<f64> = target.iter().zip(wrist).map(|(t, w)| t - w).collect();
    let reach = to.iter().map(|v| v * v).sum::<f64>().sqrt();
    if speed < SPEED_EPS || reach < SPEED_EPS {
        return 0.0;
    }
    velocity.iter().zip(&to).map(|(v, t)| v * t).sum::<f64>() / (speed * reach)
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// One filter step from explicit log-likelihoods `ln P(h_k | o, m_k)`.
///
/// `prev_motion = None` marks the first step: no object transition is applied
/// and the motion factor is `P(m_k | m_k, o)`.
pub fn update_with_log_likelihoods(
    prev: &ObjectBelief,
    log_likelihoods: &[f64],
    motion: MotionId,
    prev_motion: Option<MotionId>,
    models: &TransitionModels,
) -> Result<ObjectBelief, ObjectError> {
    let n = models.n_objects();
    for len in [prev.probabilities.len(), log_likelihoods.len()] {
        if len != n {
            return Err(ObjectError::Dimension { expected: n, got: len });
        }
    }
    let log_prev: Vec<f64> = prev.probabilities.iter().map(|p| p.ln()).collect();
    let log_post: Vec<f64> = (0..n)
        .map(|o| {
            let predicted = match prev_motion {
                Some(mp) => logsumexp(
                    (0..n).map(|op| models.object_prob(ObjectId(o), mp, ObjectId(op)).ln() + log_prev[op]),
                ),
                None => log_prev[o],
            };
            let mp = prev_motion.unwrap_or(motion);
            models.motion_prob(motion, mp, ObjectId(o)).ln() + log_likelihoods[o] + predicted
        })
        .collect();
    let total = logsumexp(log_post.iter().copied());
    let probabilities = if total.is_nan() || total < LOG_UNDERFLOW {
        log::warn!("object belief underflow at step {}; resetting to uniform", prev.step + 1);
        vec![1.0 / n as f64; n]
    } else {
        log_post.iter().map(|l| (l - total).exp()).collect()
    };
    Ok(ObjectBelief {
        probabilities,
        step: prev.step + 1,
    })
}

/// One filter step from a wrist sample.
#[allow(clippy::too_many_arguments)]
pub fn update_belief(
    prev: &ObjectBelief,
    wrist: &[f64; 3],
    velocity: &[f64; 3],
    motion: MotionId,
    prev_motion: Option<MotionId>,
    positions: &[[f64; 3]],
    models: &TransitionModels,
    value: &ValueModel,
) -> Result<ObjectBelief, ObjectError> {
    let log_lik: Vec<f64> = positions
        .iter()
        .map(|p| value.log_likelihood(wrist, velocity, p, motion))
        .collect();
    update_with_log_likelihoods(prev, &log_lik, motion, prev_motion, models)
}

/// Stateful filter over a stream of wrist samples and motion labels.
#[derive(Debug, Clone)]
pub struct ObjectFilter {
    models: TransitionModels,
    value: ValueModel,
    positions: Vec<[f64; 3]>,
    belief: ObjectBelief,
    last_motion: Option<MotionId>,
    last_sample: Option<([f64; 3], f64)>,
}

impl ObjectFilter {
    pub fn new(models: TransitionModels, value: ValueModel, positions: Vec<[f64; 3]>) -> Self {
        let belief = ObjectBelief::uniform(positions.len());
        ObjectFilter {
            models,
            value,
            positions,
            belief,
            last_motion: None,
            last_sample: None,
        }
    }

    pub fn for_library(library: &PlanLibrary, value: ValueModel) -> Self {
        let positions = library.objects().iter().map(|o| o.position).collect();
        Self::new(TransitionModels::from_library(library, 0.9), value, positions)
    }

    /// Updates with a wrist sample; velocity is the backward difference from
    /// the previous sample.
    pub fn observe(&mut self, wrist: [f64; 3], timestamp: f64, motion: MotionId) -> &ObjectBelief {
        let velocity = match self.last_sample {
            Some((prev, t)) if timestamp > t => {
                let dt = timestamp - t;
                [(wrist[0] - prev[0]) / dt, (wrist[1] - prev[1]) / dt, (wrist[2] - prev[2]) / dt]
            }
            _ => [0.0; 3],
        };
        self.belief = update_belief(
            &self.belief,
            &wrist,
            &velocity,
            motion,
            self.last_motion,
            &self.positions,
            &self.models,
            &self.value,
        )
        .expect("filter dimensions are fixed at construction");
        self.last_motion = Some(motion);
        self.last_sample = Some((wrist, timestamp));
        &self.belief
    }

    pub fn belief(&self) -> &ObjectBelief {
        &self.belief
    }

    pub fn estimate(&self) -> ObjectId {
        self.belief.argmax()
    }

    pub fn reset(&mut self) {
        self.belief = ObjectBelief::uniform(self.positions.len());
        self.last_motion = None;
        self.last_sample = None;
    }
}
