//! Task vocabulary: motions, objects, actions, subtasks, plans and the plan
//! library that ties them together.
//!
//! A plan library is stored as a single JSON document:
//!
//! ```json
//! {
//!   "motions":   [{"id": 0, "name": "fetching"}, ...],
//!   "objects":   [{"id": 0, "name": "cpu fan", "position": [x, y, z]}, ...],
//!   "feasibility": [[true, false, ...], ...],          // motion x object
//!   "subtasks":  [{"id": 0, "name": "...",
//!                  "human_actions": [{"motion": 0, "object": 0}, ...],
//!                  "robot_actions": [{"motion": 4, "object": 2, "trigger_index": 0}]}],
//!   "plans": "auto",                                    // or [{"order": [0, 2, 1]}, ...]
//!   "prior": [0.25, ...]                                // optional, uniform when absent
//! }
//! ```
//!
//! `"plans": "auto"` expands every permutation of the subtasks. A robot action's
//! `trigger_index` is the position of the human action (within its subtask)
//! after which a reactive robot may start it.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

/// Upper bound on subtasks for permutation expansion (8! = 40320 plans).
pub const MAX_SUBTASKS: usize = 8;

const PRIOR_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid plan library: {0}")]
    Validation(String),
    #[error("too many subtasks to enumerate: {0} (limit {MAX_SUBTASKS})")]
    TooManySubtasks(usize),
}

impl From<serde_json::Error> for LibraryError {
    fn from(err: serde_json::Error) -> Self {
        LibraryError::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> LibraryError {
    LibraryError::Validation(msg.into())
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Dense motion label in `[0, n_motions)`.
    MotionId
);
id_type!(ObjectId);
id_type!(SubtaskId);
id_type!(
    /// Zero-based plan index; display names are one-based (`P1`, `P2`, ...).
    PlanId
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub id: MotionId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: ObjectId,
    pub name: String,
    /// Workspace-frame position in meters.
    pub position: [f64; 3],
}

/// A (motion, target object) pair: the observable symbol of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub motion: MotionId,
    pub object: ObjectId,
}

impl Action {
    pub fn new(motion: usize, object: usize) -> Self {
        Action {
            motion: MotionId(motion),
            object: ObjectId(object),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.motion, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotAction {
    #[serde(flatten)]
    pub action: Action,
    pub trigger_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: SubtaskId,
    pub name: String,
    pub human_actions: Vec<Action>,
    #[serde(default)]
    pub robot_actions: Vec<RobotAction>,
}

/// Identity of a robot action: its subtask and position in that subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RobotStepId {
    pub subtask: SubtaskId,
    pub index: usize,
}

impl fmt::Display for RobotStepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}.{}", self.subtask, self.index)
    }
}

/// A robot action placed on a plan's timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotStep {
    pub id: RobotStepId,
    pub action: Action,
    /// Global reference index of the triggering human action.
    pub trigger: usize,
    /// Global reference index of the human action that waits for this step
    /// (the first later action in the subtask acting on the same object),
    /// or `trigger + 1` when no human action depends on it.
    pub needed_at: usize,
    /// Whether some human action actually waits for this step.
    pub blocking: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub id: PlanId,
    pub subtask_order: Vec<SubtaskId>,
    /// Expanded human reference sequence `R = r_1..r_N`.
    pub reference: Vec<Action>,
    /// Robot steps ordered by trigger position.
    pub robot_steps: Vec<RobotStep>,
}

impl Plan {
    pub fn name(&self) -> String {
        format!("P{}", self.id.0 + 1)
    }

    /// Robot steps that the human action at `index` waits for.
    pub fn blockers_of(&self, index: usize) -> impl Iterator<Item = &RobotStep> {
        self.robot_steps
            .iter()
            .filter(move |s| s.blocking && s.needed_at == index)
    }
}

/// Ordering restrictions for plan enumeration.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum OrderConstraint {
    #[default]
    None,
    /// Each pair `(a, b)` requires subtask `a` to precede subtask `b`.
    Partial(Vec<(SubtaskId, SubtaskId)>),
}

impl OrderConstraint {
    fn admits(&self, order: &[SubtaskId]) -> bool {
        match self {
            OrderConstraint::None => true,
            OrderConstraint::Partial(pairs) => pairs.iter().all(|(a, b)| {
                let pa = order.iter().position(|s| s == a);
                let pb = order.iter().position(|s| s == b);
                match (pa, pb) {
                    (Some(pa), Some(pb)) => pa < pb,
                    _ => true,
                }
            }),
        }
    }
}

/// Expands one subtask ordering into a plan.
pub fn expand_plan(id: PlanId, subtasks: &[Subtask], order: &[SubtaskId]) -> Result<Plan, LibraryError> {
    let mut reference = Vec::new();
    let mut robot_steps = Vec::new();
    for sid in order {
        let subtask = subtasks
            .iter()
            .find(|s| s.id == *sid)
            .ok_or_else(|| invalid(format!("plan {} references unknown subtask {sid}", id.0 + 1)))?;
        let offset = reference.len();
        for (index, ra) in subtask.robot_actions.iter().enumerate() {
            let dependent = subtask
                .human_actions
                .iter()
                .enumerate()
                .skip(ra.trigger_index + 1)
                .find(|(_, h)| h.object == ra.action.object)
                .map(|(i, _)| i);
            robot_steps.push(RobotStep {
                id: RobotStepId { subtask: *sid, index },
                action: ra.action,
                trigger: offset + ra.trigger_index,
                needed_at: offset + dependent.unwrap_or(ra.trigger_index + 1),
                blocking: dependent.is_some(),
            });
        }
        reference.extend_from_slice(&subtask.human_actions);
    }
    robot_steps.sort_by_key(|s| s.trigger);
    Ok(Plan {
        id,
        subtask_order: order.to_vec(),
        reference,
        robot_steps,
    })
}

/// Enumerates every subtask permutation admitted by `constraint`, in
/// lexicographic order of subtask positions.
pub fn enumerate_plans(subtasks: &[Subtask], constraint: &OrderConstraint) -> Result<Vec<Plan>, LibraryError> {
    if subtasks.len() > MAX_SUBTASKS {
        return Err(LibraryError::TooManySubtasks(subtasks.len()));
    }
    if subtasks.is_empty() {
        return Err(invalid("no subtasks"));
    }
    let ids: Vec<SubtaskId> = subtasks.iter().map(|s| s.id).collect();
    let mut plans = Vec::new();
    for order in ids.iter().copied().permutations(ids.len()) {
        if constraint.admits(&order) {
            plans.push(expand_plan(PlanId(plans.len()), subtasks, &order)?);
        }
    }
    Ok(plans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum PlansField {
    Keyword(String),
    Explicit(Vec<PlanOrder>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanOrder {
    order: Vec<SubtaskId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    motions: Vec<Motion>,
    objects: Vec<Object>,
    feasibility: Vec<Vec<bool>>,
    subtasks: Vec<Subtask>,
    plans: PlansField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior: Option<Vec<f64>>,
}

/// Immutable, validated plan library.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanLibrary {
    motions: Vec<Motion>,
    objects: Vec<Object>,
    feasibility: Vec<Vec<bool>>,
    subtasks: Vec<Subtask>,
    plans: Vec<Plan>,
    prior: Vec<f64>,
    source: LibraryFile,
}

impl PlanLibrary {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LibraryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LibraryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, LibraryError> {
        let file: LibraryFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    /// The desktop-assembly library: three unordered subtasks, nine human
    /// actions and three robot deliveries.
    pub fn desktop() -> Self {
        Self::from_json(include_str!("../data/desktop.json")).expect("bundled library is valid")
    }

    /// Canonical JSON form.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.source).expect("library serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LibraryError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|source| LibraryError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    fn from_file(file: LibraryFile) -> Result<Self, LibraryError> {
        if file.motions.is_empty() {
            return Err(invalid("at least one motion is required"));
        }
        for (i, m) in file.motions.iter().enumerate() {
            if m.id.0 != i {
                return Err(invalid(format!(
                    "motion ids must be dense and ordered: entry {i} has id {}",
                    m.id
                )));
            }
        }
        for (i, o) in file.objects.iter().enumerate() {
            if o.id.0 != i {
                return Err(invalid(format!(
                    "object ids must be dense and ordered: entry {i} has id {}",
                    o.id
                )));
            }
            if o.position.iter().any(|c| !c.is_finite()) {
                return Err(invalid(format!("object {} has a non-finite position", o.id)));
            }
        }
        if file.feasibility.len() != file.motions.len()
            || file.feasibility.iter().any(|row| row.len() != file.objects.len())
        {
            return Err(invalid(format!(
                "feasibility table must be {} x {} (motions x objects)",
                file.motions.len(),
                file.objects.len()
            )));
        }

        let check_action = |a: &Action, ctx: &str| -> Result<(), LibraryError> {
            if a.motion.0 >= file.motions.len() || a.object.0 >= file.objects.len() {
                return Err(invalid(format!("{ctx}: action {a} references an unknown motion or object")));
            }
            if !file.feasibility[a.motion.0][a.object.0] {
                return Err(invalid(format!(
                    "{ctx}: action ({}, {}) is not feasible",
                    file.motions[a.motion.0].name, file.objects[a.object.0].name
                )));
            }
            Ok(())
        };

        let mut seen = HashSet::new();
        for s in &file.subtasks {
            if !seen.insert(s.id) {
                return Err(invalid(format!("duplicate subtask id {}", s.id)));
            }
            if s.human_actions.is_empty() {
                return Err(invalid(format!("subtask {} has no human actions", s.id)));
            }
            let ctx = format!("subtask {}", s.id);
            for a in &s.human_actions {
                check_action(a, &ctx)?;
            }
            for ra in &s.robot_actions {
                check_action(&ra.action, &ctx)?;
                if ra.trigger_index >= s.human_actions.len() {
                    return Err(invalid(format!(
                        "{ctx}: robot trigger index {} out of range",
                        ra.trigger_index
                    )));
                }
            }
        }

        let plans = match &file.plans {
            PlansField::Keyword(k) if k == "auto" => enumerate_plans(&file.subtasks, &OrderConstraint::None)?,
            PlansField::Keyword(k) => return Err(invalid(format!("unknown plans keyword {k:?}"))),
            PlansField::Explicit(orders) => {
                let mut plans = Vec::with_capacity(orders.len());
                for (i, p) in orders.iter().enumerate() {
                    let mut sorted = p.order.clone();
                    sorted.sort();
                    let mut all: Vec<SubtaskId> = file.subtasks.iter().map(|s| s.id).collect();
                    all.sort();
                    if sorted != all {
                        return Err(invalid(format!("plan {} is not a permutation of the subtasks", i + 1)));
                    }
                    plans.push(expand_plan(PlanId(i), &file.subtasks, &p.order)?);
                }
                plans
            }
        };
        if plans.is_empty() {
            return Err(invalid("library has no plans"));
        }
        for (a, b) in plans.iter().tuple_combinations() {
            if a.reference == b.reference {
                return Err(invalid(format!(
                    "plans {} and {} have identical reference sequences",
                    a.name(),
                    b.name()
                )));
            }
        }

        let prior = match &file.prior {
            None => vec![1.0 / plans.len() as f64; plans.len()],
            Some(p) => {
                if p.len() != plans.len() {
                    return Err(invalid(format!("prior has {} entries for {} plans", p.len(), plans.len())));
                }
                if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(invalid("prior entries must be finite and nonnegative"));
                }
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > PRIOR_TOLERANCE {
                    return Err(invalid(format!("prior sums to {sum}, expected 1")));
                }
                p.clone()
            }
        };

        Ok(PlanLibrary {
            motions: file.motions.clone(),
            objects: file.objects.clone(),
            feasibility: file.feasibility.clone(),
            subtasks: file.subtasks.clone(),
            plans,
            prior,
            source: file,
        })
    }

    pub fn motions(&self) -> &[Motion] {
        &self.motions
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn subtasks(&self) -> &[Subtask] {
        &self.subtasks
    }

    pub fn plans(&self) -> &[Plan] {
        &self.plans
    }

    pub fn plan(&self, id: PlanId) -> &Plan {
        &self.plans[id.0]
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn n_motions(&self) -> usize {
        self.motions.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn is_feasible(&self, action: Action) -> bool {
        self.feasibility
            .get(action.motion.0)
            .and_then(|row| row.get(action.object.0))
            .copied()
            .unwrap_or(false)
    }

    pub fn feasibility(&self) -> &[Vec<bool>] {
        &self.feasibility
    }

    pub fn object_position(&self, id: ObjectId) -> [f64; 3] {
        self.objects[id.0].position
    }

    pub fn motion_by_name(&self, name: &str) -> Option<MotionId> {
        self.motions.iter().find(|m| m.name == name).map(|m| m.id)
    }

    /// Motions performed by the human in at least one subtask, ascending.
    pub fn human_motions(&self) -> Vec<MotionId> {
        let mut ids: Vec<MotionId> = self
            .subtasks
            .iter()
            .flat_map(|s| s.human_actions.iter().map(|a| a.motion))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Distinct human actions across all subtasks, in first-appearance order.
    pub fn human_actions(&self) -> Vec<Action> {
        let mut out: Vec<Action> = Vec::new();
        for a in self.subtasks.iter().flat_map(|s| s.human_actions.iter()) {
            if !out.contains(a) {
                out.push(*a);
            }
        }
        out
    }

    /// Human-readable label, e.g. `fetching(cpu fan)`.
    pub fn action_label(&self, action: Action) -> String {
        let m = self.motions.get(action.motion.0).map(|m| m.name.as_str()).unwrap_or("?");
        let o = self.objects.get(action.object.0).map(|o| o.name.as_str()).unwrap_or("?");
        format!("{m}({o})")
    }

    /// True when every pair of plan references differs at some shared index.
    pub fn identifiable(&self) -> bool {
        self.plans.iter().tuple_combinations().all(|(a, b)| {
            a.reference
                .iter()
                .zip(&b.reference)
                .any(|(x, y)| x != y)
        })
    }

    /// Plans whose reference sequence begins with `prefix`.
    pub fn plans_with_prefix(&self, prefix: &[Action]) -> Vec<PlanId> {
        self.plans
            .iter()
            .filter(|p| p.reference.len() >= prefix.len() && p.reference[..prefix.len()] == *prefix)
            .map(|p| p.id)
            .collect()
    }
}

/// A single perceived human pose sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanPose {
    /// Wrist position in the workspace frame, meters.
    pub wrist: [f64; 3],
    /// Velocities of selected finger key points, m/s, flattened xyz.
    pub finger_velocities: Vec<f64>,
    /// Seconds.
    pub timestamp: f64,
}

impl HumanPose {
    pub fn is_finite(&self) -> bool {
        self.wrist.iter().chain(&self.finger_velocities).all(|x| x.is_finite()) && self.timestamp.is_finite()
    }

    /// Classifier input vector: wrist position followed by finger velocities.
    pub fn features(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(3 + self.finger_velocities.len());
        x.extend_from_slice(&self.wrist);
        x.extend_from_slice(&self.finger_velocities);
        x
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subtask(id: usize, actions: &[(usize, usize)]) -> Subtask {
        Subtask {
            id: SubtaskId(id),
            name: format!("s{id}"),
            human_actions: actions.iter().map(|&(m, o)| Action::new(m, o)).collect(),
            robot_actions: vec![],
        }
    }

    #[test]
    fn desktop_library_has_six_plans() {
        let lib = PlanLibrary::desktop();
        assert_eq!(lib.plans().len(), 6);
        assert_eq!(lib.subtasks().len(), 3);
        assert!(lib.identifiable());
        let first = &lib.plans()[0];
        assert_eq!(first.subtask_order, vec![SubtaskId(0), SubtaskId(1), SubtaskId(2)]);
        assert_eq!(first.reference.len(), 9);
        assert_eq!(first.robot_steps.len(), 3);
        // R1 is triggered by H1 and needed by H2.
        assert_eq!(first.robot_steps[0].trigger, 0);
        assert_eq!(first.robot_steps[0].needed_at, 1);
        assert_eq!(first.robot_steps[1].trigger, 3);
        assert_eq!(first.robot_steps[2].needed_at, 7);
        for p in lib.plans() {
            let expected: f64 = 1.0 / 6.0;
            assert!((lib.prior()[p.id.0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_is_concatenation_in_order() {
        let lib = PlanLibrary::desktop();
        for p in lib.plans() {
            let concat: Vec<Action> = p
                .subtask_order
                .iter()
                .flat_map(|s| lib.subtasks()[s.0].human_actions.clone())
                .collect();
            assert_eq!(concat, p.reference);
        }
    }

    #[test]
    fn single_subtask_gives_single_plan() {
        let plans = enumerate_plans(&[subtask(0, &[(0, 0), (1, 1)])], &OrderConstraint::None).unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].reference, vec![Action::new(0, 0), Action::new(1, 1)]);
    }

    #[test]
    fn four_subtasks_give_all_permutations() {
        let subtasks: Vec<Subtask> = (0..4).map(|i| subtask(i, &[(i, i)])).collect();
        let plans = enumerate_plans(&subtasks, &OrderConstraint::None).unwrap();
        // Oracle: exhaustive generation of index orderings by brute force.
        let mut brute = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let v = [a, b, c, d];
                        if (0..4).all(|x| v.contains(&x)) {
                            brute.push(v.to_vec());
                        }
                    }
                }
            }
        }
        assert_eq!(brute.len(), 24);
        assert_eq!(plans.len(), brute.len());
        let got: HashSet<Vec<usize>> = plans.iter().map(|p| p.subtask_order.iter().map(|s| s.0).collect()).collect();
        let want: HashSet<Vec<usize>> = brute.into_iter().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn partial_order_filters_permutations() {
        let subtasks: Vec<Subtask> = (0..3).map(|i| subtask(i, &[(i, i)])).collect();
        let c = OrderConstraint::Partial(vec![(SubtaskId(0), SubtaskId(2))]);
        let plans = enumerate_plans(&subtasks, &c).unwrap();
        assert_eq!(plans.len(), 3);
        for p in &plans {
            let a = p.subtask_order.iter().position(|s| s.0 == 0).unwrap();
            let b = p.subtask_order.iter().position(|s| s.0 == 2).unwrap();
            assert!(a < b);
        }
    }

    #[test]
    fn too_many_subtasks_is_rejected() {
        let subtasks: Vec<Subtask> = (0..9).map(|i| subtask(i, &[(0, 0)])).collect();
        assert!(matches!(
            enumerate_plans(&subtasks, &OrderConstraint::None),
            Err(LibraryError::TooManySubtasks(9))
        ));
    }

    #[test]
    fn expansion_is_injective_for_distinct_subtasks() {
        let subtasks: Vec<Subtask> = (0..4).map(|i| subtask(i, &[(i, 0), (i, 1)])).collect();
        let plans = enumerate_plans(&subtasks, &OrderConstraint::None).unwrap();
        let refs: HashSet<Vec<Action>> = plans.iter().map(|p| p.reference.clone()).collect();
        assert_eq!(refs.len(), plans.len());
    }

    fn with_field(field: &str, value: serde_json::Value) -> String {
        let mut v: serde_json::Value = serde_json::from_str(include_str!("../data/desktop.json")).unwrap();
        v[field] = value;
        v.to_string()
    }

    #[test]
    fn prior_not_summing_to_one_is_rejected() {
        let text = with_field("prior", serde_json::json!([0.15, 0.15, 0.15, 0.15, 0.15, 0.15]));
        let err = PlanLibrary::from_json(&text).unwrap_err();
        assert!(matches!(err, LibraryError::Validation(ref m) if m.contains("prior")), "{err}");
    }

    #[test]
    fn explicit_prior_is_kept() {
        let text = with_field("prior", serde_json::json!([0.5, 0.1, 0.1, 0.1, 0.1, 0.1]));
        let lib = PlanLibrary::from_json(&text).unwrap();
        assert_eq!(lib.prior()[0], 0.5);
    }

    #[test]
    fn infeasible_action_is_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(include_str!("../data/desktop.json")).unwrap();
        v["subtasks"][0]["human_actions"][0]["object"] = serde_json::json!(5);
        let err = PlanLibrary::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("not feasible"), "{err}");
    }

    #[test]
    fn duplicate_reference_sequences_are_rejected() {
        let text = with_field("plans", serde_json::json!([{"order": [0, 1, 2]}, {"order": [0, 1, 2]}]));
        let err = PlanLibrary::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("identical"), "{err}");
    }

    #[test]
    fn parse_error_reports_location() {
        let err = PlanLibrary::from_json("{\n  \"motions\": [\n    {\"id\": 0,, }\n]}").unwrap_err();
        match err {
            LibraryError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn explicit_plans_must_be_permutations() {
        let text = with_field("plans", serde_json::json!([{"order": [0, 1]}]));
        assert!(PlanLibrary::from_json(&text).is_err());
        let text = with_field("plans", serde_json::json!([{"order": [2, 1, 0]}]));
        let lib = PlanLibrary::from_json(&text).unwrap();
        assert_eq!(lib.plans().len(), 1);
        assert_eq!(lib.prior(), &[1.0]);
    }

    #[test]
    fn canonical_round_trip() {
        let lib = PlanLibrary::desktop();
        let text = lib.to_json();
        let again = PlanLibrary::from_json(&text).unwrap();
        assert_eq!(again.to_json(), text);
        let parse = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap();
        assert_eq!(parse(&text), parse(include_str!("../data/desktop.json")));
    }
}
