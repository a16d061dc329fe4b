//! Kinematic stand-in for the robot end effector and the proximity check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{distance, Action, PlanLibrary};
use crate::planner::Planner;
use crate::trajectory::{min_jerk, TrajectoryPredictor};

use super::human::handover_point;

pub const ROBOT_HOME: [f64; 3] = [0.75, 0.0, 0.30];
/// Share of a delivery spent reaching the tool; the rest carries it over.
const PICK_FRACTION: f64 = 0.4;

/// Source of predicted future wrist positions.
pub trait WristForecaster {
    /// `track` holds every wrist sample so far, latest last.
    fn forecast(&mut self, track: &[[f64; 3]], action: Action) -> Vec<[f64; 3]>;
}

/// Extrapolates the last observed wrist velocity.
#[derive(Debug, Clone, Copy)]
pub struct ConstantVelocity {
    pub horizon: usize,
}

impl WristForecaster for ConstantVelocity {
    fn forecast(&mut self, track: &[[f64; 3]], _action: Action) -> Vec<[f64; 3]> {
        let [.., a, b] = track else {
            return Vec::new();
        };
        (1..=self.horizon)
            .map(|k| std::array::from_fn(|i| b[i] + k as f64 * (b[i] - a[i])))
            .collect()
    }
}

impl WristForecaster for TrajectoryPredictor {
    fn forecast(&mut self, track: &[[f64; 3]], action: Action) -> Vec<[f64; 3]> {
        match self.step(track, action) {
            Ok(Some(points)) => points,
            Ok(None) => Vec::new(),
            Err(e) => {
                log::warn!("trajectory forecast failed: {e}");
                Vec::new()
            }
        }
    }
}

fn lerp(a: &[f64; 3], b: &[f64; 3], s: f64) -> [f64; 3] {
    let s = s.clamp(0.0, 1.0);
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * s)
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| a[i] - b[i])
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Offsets `target` perpendicular to `heading` just far enough to clear
/// every obstacle by `radius`. The side is the one of `from` (the current
/// position) relative to the first obstacle.
pub fn detour(target: [f64; 3], from: &[f64; 3], obstacles: &[[f64; 3]], heading: &[f64; 3], radius: f64) -> [f64; 3] {
    let Some(anchor) = obstacles.first() else {
        return target;
    };
    let v = sub(from, anchor);
    let h = norm(heading);
    let n = if h < 1e-12 {
        let len = norm(&v);
        if len < 1e-12 {
            [0.0, 0.0, 1.0]
        } else {
            v.map(|x| x / len)
        }
    } else {
        let d = heading.map(|x| x / h);
        let a = dot(&v, &d);
        let perp: [f64; 3] = std::array::from_fn(|i| v[i] - a * d[i]);
        let b = norm(&perp);
        if b < 1e-12 {
            // Any direction orthogonal to the heading.
            let trial = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
            let t = dot(&trial, &d);
            let o: [f64; 3] = std::array::from_fn(|i| trial[i] - t * d[i]);
            let on = norm(&o);
            o.map(|x| x / on)
        } else {
            perp.map(|x| x / b)
        }
    };
    // Smallest s >= 0 with |target + s n - q| >= radius for every q.
    let mut shift = 0.0f64;
    for q in obstacles {
        let w = sub(&target, q);
        let b = dot(&w, &n);
        let disc = b * b - dot(&w, &w) + radius * radius;
        if disc > 0.0 {
            shift = shift.max(-b + disc.sqrt());
        }
    }
    std::array::from_fn(|i| target[i] + shift * n[i])
}

/// End-effector position tracking the planner's timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotArm {
    position: [f64; 3],
    segment_start: [f64; 3],
    undo_total: f64,
    /// Nominal position of the previous step; gives the path direction.
    last_nominal: Option<[f64; 3]>,
    /// Meters per second.
    pub max_speed: f64,
}

impl RobotArm {
    pub fn new(home: [f64; 3], max_speed: f64) -> Self {
        RobotArm {
            position: home,
            segment_start: home,
            undo_total: 0.0,
            last_nominal: None,
            max_speed,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        self.position
    }

    /// Marks the start of a delivery from the current position.
    pub fn begin_task(&mut self) {
        self.segment_start = self.position;
    }

    /// Marks the start of undoing an aborted delivery.
    pub fn begin_recovery(&mut self, undo_seconds: f64) {
        self.segment_start = self.position;
        self.undo_total = undo_seconds;
    }

    /// Position the planner's state calls for: pick, carry to the handover
    /// point, or return an aborted tool.
    pub fn nominal(&self, planner: &Planner, library: &PlanLibrary, duration: &dyn Fn(Action) -> f64) -> [f64; 3] {
        if let Some(rec) = planner.recovering() {
            let tool = library.object_position(rec.step.action.object);
            let s = if self.undo_total > 0.0 {
                1.0 - rec.remaining / self.undo_total
            } else {
                1.0
            };
            return lerp(&self.segment_start, &tool, s);
        }
        if let Some(task) = planner.doing() {
            let tool = library.object_position(task.step.action.object);
            let p = task.elapsed / duration(task.step.action).max(1e-9);
            return if p < PICK_FRACTION {
                lerp(&self.segment_start, &tool, p / PICK_FRACTION)
            } else {
                lerp(&tool, &handover_point(tool), (p - PICK_FRACTION) / (1.0 - PICK_FRACTION))
            };
        }
        self.position
    }

    /// Moves toward `nominal` at bounded speed, detouring around every
    /// obstacle point by `radius`; the first obstacle is the current wrist.
    pub fn step(&mut self, nominal: [f64; 3], obstacles: &[[f64; 3]], radius: f64, dt: f64) {
        let heading = sub(&nominal, &self.last_nominal.unwrap_or(self.position));
        self.last_nominal = Some(nominal);
        let target = detour(nominal, &self.position, obstacles, &heading, radius);
        let delta = sub(&target, &self.position);
        let len = norm(&delta);
        let max = self.max_speed * dt;
        self.position = if len <= max {
            target
        } else {
            std::array::from_fn(|i| self.position[i] + delta[i] * max / len)
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximityReport {
    pub min_distance: f64,
    pub violations: usize,
}

/// Minimum human-robot distance and the number of samples closer than
/// `safe_radius`.
pub fn proximity_check(pairs: impl IntoIterator<Item = ([f64; 3], [f64; 3])>, safe_radius: f64) -> ProximityReport {
    let mut report = ProximityReport {
        min_distance: f64::INFINITY,
        violations: 0,
    };
    for (h, r) in pairs {
        let d = distance(&h, &r);
        report.min_distance = report.min_distance.min(d);
        if d < safe_radius {
            report.violations += 1;
        }
    }
    report
}

/// Geometry of one tick of the adversarial scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximitySample {
    pub time: f64,
    pub human: [f64; 3],
    pub robot: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarialScenario {
    pub safe_radius: f64,
    pub dt: f64,
    pub wrist_sigma: f64,
    pub seed: u64,
    /// Seconds.
    pub duration: f64,
}

impl Default for AdversarialScenario {
    fn default() -> Self {
        AdversarialScenario {
            safe_radius: 0.15,
            dt: 0.1,
            wrist_sigma: 0.002,
            seed: 0,
            duration: 8.0,
        }
    }
}

impl AdversarialScenario {
    const ROBOT_FROM: [f64; 3] = [0.6, -0.3, 0.2];
    const ROBOT_TO: [f64; 3] = [0.6, 0.5, 0.2];
    const ROBOT_SPEED: f64 = 0.1;
    const HUMAN_FROM: [f64; 3] = [0.15, 0.0, 0.2];
    const REACH_START: f64 = 1.5;
    const REACH_TIME: f64 = 2.0;

    /// The human reaches for the point the end effector occupies when the
    /// reach ends and then holds still; the robot sweeps a straight line.
    /// With a forecaster the robot detours around current and predicted
    /// wrist positions; without one it follows its path.
    pub fn run(&self, mut forecaster: Option<&mut dyn WristForecaster>) -> Vec<ProximitySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.wrist_sigma.max(0.0)).expect("finite sigma");
        let path_len = distance(&Self::ROBOT_FROM, &Self::ROBOT_TO);
        let nominal_at = |t: f64| lerp(&Self::ROBOT_FROM, &Self::ROBOT_TO, Self::ROBOT_SPEED * t / path_len);
        let meet = nominal_at(Self::REACH_START + Self::REACH_TIME);
        let human_at = |t: f64| min_jerk(&Self::HUMAN_FROM, &meet, (t - Self::REACH_START) / Self::REACH_TIME);
        let mut robot = RobotArm::new(Self::ROBOT_FROM, 0.5);
        let mut track: Vec<[f64; 3]> = Vec::new();
        let mut out = Vec::new();
        let steps = (self.duration / self.dt).round() as usize;
        let action = Action::new(0, 0);
        for k in 0..steps {
            let t = k as f64 * self.dt;
            let wrist: [f64; 3] = human_at(t).map(|x| x + noise.sample(&mut rng));
            track.push(wrist);
            let mut obstacles = Vec::new();
            if let Some(f) = forecaster.as_deref_mut() {
                obstacles.push(wrist);
                obstacles.extend(f.forecast(&track, action));
            }
            robot.step(nominal_at(t + self.dt), &obstacles, self.safe_radius, self.dt);
            let next: [f64; 3] = human_at(t + self.dt);
            out.push(ProximitySample {
                time: t + self.dt,
                human: next,
                robot: robot.position(),
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detour_lands_on_sphere_perpendicular_to_heading() {
        let q = [0.0, 0.0, 0.0];
        let heading = [0.0, 1.0, 0.0];
        let t = detour([0.05, 0.02, 0.0], &[0.05, 0.02, 0.0], &[q], &heading, 0.1);
        assert!((distance(&t, &q) - 0.1).abs() < 1e-12);
        assert!((t[1] - 0.02).abs() < 1e-12, "along-heading component kept");
        assert!(t[0] > 0.05);
        assert_eq!(detour([0.2, 0.0, 0.0], &[0.2, 0.0, 0.0], &[q], &heading, 0.1), [0.2, 0.0, 0.0]);
    }

    #[test]
    fn detour_clears_every_obstacle() {
        let obstacles = [[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [0.1, 0.01, 0.0]];
        let t = detour([0.02, 0.0, 0.0], &[0.02, 0.0, 0.0], &obstacles, &[0.0, 1.0, 0.0], 0.1);
        for q in &obstacles {
            assert!(distance(&t, q) >= 0.1 - 1e-12);
        }
        assert!(t[1].abs() < 1e-12 && t[2].abs() < 1e-12);
    }

    #[test]
    fn detour_handles_dead_center() {
        let t = detour([0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], &[[0.0, 0.0, 0.0]], &[0.0, 1.0, 0.0], 0.1);
        assert!((norm(&t) - 0.1).abs() < 1e-12);
        assert!(t[1].abs() < 1e-12);
    }

    #[test]
    fn arm_respects_speed_limit() {
        let mut arm = RobotArm::new([0.0; 3], 0.5);
        arm.step([1.0, 0.0, 0.0], &[], 0.1, 0.1);
        assert!((arm.position()[0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn disjoint_workspaces_have_no_violations() {
        let pairs = (0..50).map(|k| ([0.0, 0.01 * k as f64, 0.0], [1.0, 0.0, 0.0]));
        let r = proximity_check(pairs, 0.15);
        assert_eq!(r.violations, 0);
        assert!(r.min_distance >= 1.0);
    }

    #[test]
    fn adversarial_without_prediction_violates() {
        for seed in 0..10 {
            let s = AdversarialScenario {
                seed,
                ..AdversarialScenario::default()
            };
            let run = s.run(None);
            let r = proximity_check(run.iter().map(|p| (p.human, p.robot)), s.safe_radius);
            assert!(r.violations > 0, "{r:?}");
        }
    }

    #[test]
    fn adversarial_with_prediction_keeps_distance() {
        for seed in 0..10 {
            let s = AdversarialScenario {
                seed,
                ..AdversarialScenario::default()
            };
            let mut cv = ConstantVelocity { horizon: 10 };
            let run = s.run(Some(&mut cv));
            let r = proximity_check(run.iter().map(|p| (p.human, p.robot)), s.safe_radius);
            assert!(r.min_distance >= s.safe_radius * 0.9, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let mut cv = ConstantVelocity { horizon: 3 };
        let f = cv.forecast(&[[0.0; 3], [0.1, 0.0, 0.0]], Action::new(0, 0));
        assert!((f[2][0] - 0.4).abs() < 1e-12);
        assert!(cv.forecast(&[[0.0; 3]], Action::new(0, 0)).is_empty());
    }
}
