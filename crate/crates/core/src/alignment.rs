//! Dynamic time warping over discrete symbol sequences, including the
//! open-end variant that matches a query against every prefix of a reference.
//!
//! The distance of a warping path is its weighted local cost divided by the sum
//! of its step weights. Because that ratio does not decompose over cells, the
//! optimum is found by parametric search: for a candidate ratio `rho` a standard
//! DP minimizes `sum (d - rho) * m`, and `rho` is replaced by the ratio of the
//! resulting path until no path scores below zero. Every iteration is a single
//! O(MN) pass; in practice two or three iterations suffice.
//!
//! Paths are lists of `(reference_index, query_index)` pairs, zero-based.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignmentError {
    #[error("cannot align an empty sequence")]
    EmptySequence,
    #[error("invalid step pattern: {0}")]
    InvalidPattern(String),
    #[error("invalid local cost: {0}")]
    InvalidCost(String),
    #[error("no admissible warping path under the step pattern")]
    NoAdmissiblePath,
}

/// Local distance between a reference symbol and a query symbol.
#[derive(Debug, Clone, Default)]
pub enum LocalCost<T> {
    /// 0 for equal symbols, 1 otherwise.
    #[default]
    Discrete01,
    Table(CostTable<T>),
}

impl<T: PartialEq> LocalCost<T> {
    pub fn cost(&self, reference: &T, query: &T) -> f64 {
        match self {
            LocalCost::Discrete01 => {
                if reference == query {
                    0.0
                } else {
                    1.0
                }
            }
            LocalCost::Table(t) => t.get(reference, query),
        }
    }
}

/// Explicit symbol-pair costs. Identical symbols always cost 0; unlisted
/// distinct pairs cost `default`.
#[derive(Debug, Clone)]
pub struct CostTable<T> {
    entries: Vec<(T, T, f64)>,
    default: f64,
}

impl<T: PartialEq> CostTable<T> {
    pub fn new(default: f64) -> Result<Self, AlignmentError> {
        if !(default.is_finite() && default >= 0.0) {
            return Err(AlignmentError::InvalidCost(format!("default cost {default}")));
        }
        Ok(CostTable {
            entries: Vec::new(),
            default,
        })
    }

    pub fn set(&mut self, reference: T, query: T, cost: f64) -> Result<(), AlignmentError> {
        if !(cost.is_finite() && cost >= 0.0) {
            return Err(AlignmentError::InvalidCost(format!("cost {cost} must be finite and nonnegative")));
        }
        if reference == query && cost != 0.0 {
            return Err(AlignmentError::InvalidCost("cost(a, a) must be 0".into()));
        }
        match self.entries.iter_mut().find(|(r, q, _)| *r == reference && *q == query) {
            Some(entry) => entry.2 = cost,
            None => self.entries.push((reference, query, cost)),
        }
        Ok(())
    }

    fn get(&self, reference: &T, query: &T) -> f64 {
        if reference == query {
            return 0.0;
        }
        self.entries
            .iter()
            .find(|(r, q, _)| r == reference && q == query)
            .map(|(_, _, c)| *c)
            .unwrap_or(self.default)
    }
}

/// One admissible local step: how far it advances the reference and query
/// indices, and its weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub reference: usize,
    pub query: usize,
    pub weight: f64,
}

/// Set of admissible steps. Steps are kept in tie-break preference order:
/// diagonal, then reference-advance `(1, 0)`, then query-advance `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPattern {
    steps: Vec<Step>,
}

impl Default for StepPattern {
    fn default() -> Self {
        Self::symmetric()
    }
}

impl StepPattern {
    /// `{(1,1), (1,0), (0,1)}` with unit weights.
    pub fn symmetric() -> Self {
        Self::weighted(1.0, 1.0, 1.0).expect("unit weights are valid")
    }

    /// All three steps with the given weights (diagonal, reference, query).
    pub fn weighted(diagonal: f64, reference: f64, query: f64) -> Result<Self, AlignmentError> {
        Self::new(vec![
            Step { reference: 1, query: 1, weight: diagonal },
            Step { reference: 1, query: 0, weight: reference },
            Step { reference: 0, query: 1, weight: query },
        ])
    }

    pub fn new(mut steps: Vec<Step>) -> Result<Self, AlignmentError> {
        for s in &steps {
            if !matches!((s.reference, s.query), (1, 1) | (1, 0) | (0, 1)) {
                return Err(AlignmentError::InvalidPattern(format!(
                    "step ({}, {}) is not one of (1,1), (1,0), (0,1)",
                    s.reference, s.query
                )));
            }
            if !(s.weight.is_finite() && s.weight > 0.0) {
                return Err(AlignmentError::InvalidPattern(format!("weight {} must be positive", s.weight)));
            }
        }
        let rank = |s: &Step| match (s.reference, s.query) {
            (1, 1) => 0,
            (1, 0) => 1,
            _ => 2,
        };
        steps.sort_by_key(rank);
        steps.dedup_by_key(|s| rank(s));
        if steps.first().map(rank) != Some(0) {
            return Err(AlignmentError::InvalidPattern("the diagonal step must be allowed".into()));
        }
        Ok(StepPattern { steps })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Weight charged to the first cell of every path.
    pub fn start_weight(&self) -> f64 {
        self.steps[0].weight
    }

    /// Weight of the step from `prev` to `next`, if admissible.
    pub fn weight_between(&self, prev: (usize, usize), next: (usize, usize)) -> Option<f64> {
        let dr = next.0.checked_sub(prev.0)?;
        let dq = next.1.checked_sub(prev.1)?;
        self.steps
            .iter()
            .find(|s| s.reference == dr && s.query == dq)
            .map(|s| s.weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Normalized warped distance `sum(d * m) / sum(m)`.
    pub distance: f64,
    /// Unnormalized `sum(d * m)` along the path.
    pub cost: f64,
    /// `sum(m)` along the path.
    pub weight: f64,
    /// Number of reference symbols matched (`j*`, in `1..=N`).
    pub matched_len: usize,
    pub path: Vec<(usize, usize)>,
}

impl AlignmentResult {
    /// Zero-based reference index of the last matched symbol.
    pub fn matched_end(&self) -> usize {
        self.matched_len - 1
    }
}

/// Weighted cost and weight sum of an explicit path; `None` if the path is
/// not admissible under `steps`.
pub fn path_cost<T: PartialEq>(
    query: &[T],
    reference: &[T],
    path: &[(usize, usize)],
    cost: &LocalCost<T>,
    steps: &StepPattern,
) -> Option<(f64, f64)> {
    let first = *path.first()?;
    if first != (0, 0) {
        return None;
    }
    let mut c = cost.cost(&reference[0], &query[0]) * steps.start_weight();
    let mut w = steps.start_weight();
    for pair in path.windows(2) {
        let m = steps.weight_between(pair[0], pair[1])?;
        let (i, j) = pair[1];
        c += cost.cost(reference.get(i)?, query.get(j)?) * m;
        w += m;
    }
    Some((c, w))
}

const DIAG: u8 = 0;
const NONE: u8 = u8::MAX;

struct Grid {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    back: Vec<u8>,
}

impl Grid {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.value[i * self.cols + j]
    }
}

fn tie_tolerance(x: f64) -> f64 {
    1e-12 * (1.0 + x.abs())
}

/// Minimizes `sum (d - rho) * m` over paths from (0, 0) to every cell.
/// Rows index the reference, columns the query.
fn fill<T: PartialEq>(query: &[T], reference: &[T], cost: &LocalCost<T>, steps: &StepPattern, rho: f64) -> Grid {
    let (rows, cols) = (reference.len(), query.len());
    let mut value = vec![f64::INFINITY; rows * cols];
    let mut back = vec![NONE; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let local = cost.cost(&reference[i], &query[j]) - rho;
            let idx = i * cols + j;
            if i == 0 && j == 0 {
                value[idx] = local * steps.start_weight();
                back[idx] = DIAG;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut choice = NONE;
            for (k, s) in steps.steps().iter().enumerate() {
                if i < s.reference || j < s.query {
                    continue;
                }
                let prev = value[(i - s.reference) * cols + (j - s.query)];
                if prev.is_infinite() {
                    continue;
                }
                let v = prev + local * s.weight;
                // Earlier steps win ties.
                if choice == NONE || v < best - tie_tolerance(best) {
                    best = v;
                    choice = k as u8;
                }
            }
            value[idx] = best;
            back[idx] = choice;
        }
    }
    Grid { rows, cols, value, back }
}

fn backtrack(grid: &Grid, steps: &StepPattern, end: (usize, usize)) -> Vec<(usize, usize)> {
    let mut path = vec![end];
    let (mut i, mut j) = end;
    while (i, j) != (0, 0) {
        let s = steps.steps()[grid.back[i * grid.cols + j] as usize];
        i -= s.reference;
        j -= s.query;
        path.push((i, j));
    }
    path.reverse();
    path
}

fn end_cell(grid: &Grid, open_end: bool) -> Option<(usize, usize)> {
    let last = grid.cols - 1;
    if !open_end {
        let v = grid.at(grid.rows - 1, last);
        return v.is_finite().then_some((grid.rows - 1, last));
    }
    let best = (0..grid.rows).map(|i| grid.at(i, last)).fold(f64::INFINITY, f64::min);
    if best.is_infinite() {
        return None;
    }
    // Smallest truncation wins ties.
    (0..grid.rows)
        .find(|&i| grid.at(i, last) <= best + tie_tolerance(best))
        .map(|i| (i, last))
}

const MAX_ITERATIONS: usize = 100;

fn align<T: PartialEq>(
    query: &[T],
    reference: &[T],
    cost: &LocalCost<T>,
    steps: &StepPattern,
    open_end: bool,
) -> Result<AlignmentResult, AlignmentError> {
    if query.is_empty() || reference.is_empty() {
        return Err(AlignmentError::EmptySequence);
    }
    let mut rho = 0.0;
    let mut best: Option<AlignmentResult> = None;
    for _ in 0..MAX_ITERATIONS {
        let grid = fill(query, reference, cost, steps, rho);
        let end = end_cell(&grid, open_end).ok_or(AlignmentError::NoAdmissiblePath)?;
        let score = grid.at(end.0, end.1);
        let path = backtrack(&grid, steps, end);
        let (c, w) = path_cost(query, reference, &path, cost, steps).expect("DP paths are admissible");
        let candidate = AlignmentResult {
            distance: c / w,
            cost: c,
            weight: w,
            matched_len: end.0 + 1,
            path,
        };
        // No path scores below zero at this rho: the current ratio is optimal,
        // and the path just found is the tie-preferred optimum.
        let converged = best.is_some() && score >= -tie_tolerance(w);
        if converged {
            let prev = best.take().expect("checked above");
            return Ok(if candidate.distance <= prev.distance + 1e-15 { candidate } else { prev });
        }
        rho = candidate.distance;
        best = Some(candidate);
    }
    best.ok_or(AlignmentError::NoAdmissiblePath)
}

/// Minimum normalized DTW distance between `query` and the full `reference`.
pub fn dtw<T: PartialEq>(
    query: &[T],
    reference: &[T],
    cost: &LocalCost<T>,
    steps: &StepPattern,
) -> Result<AlignmentResult, AlignmentError> {
    align(query, reference, cost, steps, false)
}

/// Minimum normalized DTW distance between `query` and any prefix of
/// `reference`, computed in the same pass; `matched_len` is the smallest
/// prefix length attaining it.
pub fn open_end_dtw<T: PartialEq>(
    query: &[T],
    reference: &[T],
    cost: &LocalCost<T>,
    steps: &StepPattern,
) -> Result<AlignmentResult, AlignmentError> {
    align(query, reference, cost, steps, true)
}

/// Minimum unnormalized cost `sum(d * m)` of a full warping path.
pub fn min_cost<T: PartialEq>(
    query: &[T],
    reference: &[T],
    cost: &LocalCost<T>,
    steps: &StepPattern,
) -> Result<f64, AlignmentError> {
    if query.is_empty() || reference.is_empty() {
        return Err(AlignmentError::EmptySequence);
    }
    let grid = fill(query, reference, cost, steps, 0.0);
    let v = grid.at(grid.rows - 1, grid.cols - 1);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AlignmentError::NoAdmissiblePath)
    }
}

/// Minimum unnormalized cost over warping paths onto any prefix of `reference`.
pub fn min_open_end_cost<T: PartialEq>(
    query: &[T],
    reference: &[T],
    cost: &LocalCost<T>,
    steps: &StepPattern,
) -> Result<f64, AlignmentError> {
    if query.is_empty() || reference.is_empty() {
        return Err(AlignmentError::EmptySequence);
    }
    let grid = fill(query, reference, cost, steps, 0.0);
    end_cell(&grid, true)
        .map(|(i, j)| grid.at(i, j))
        .ok_or(AlignmentError::NoAdmissiblePath)
}
