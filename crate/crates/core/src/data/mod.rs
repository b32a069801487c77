//! Trajectory data model, validation, cross-fitting folds and history features.
//!
//! Time indices are 1-based throughout the public API (`t = 1..=T`), matching
//! the usual notation for trajectories `S_{1:T}`, `A_{1:T}`.

mod io;

pub use io::{load_dataset, save_dataset, DatasetSchema};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// One observed trajectory: states `S_{1:T}`, actions `A_{1:T}`, outcome `Y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<f64>,
    dim: usize,
    actions: Vec<usize>,
    outcome: f64,
    terminal_entry: Option<usize>,
}

impl Trajectory {
    /// Builds a trajectory from per-time state vectors.
    pub fn new(
        states: Vec<Vec<f64>>,
        actions: Vec<usize>,
        outcome: f64,
        terminal_entry: Option<usize>,
    ) -> Result<Self> {
        let dim = states.first().map_or(0, Vec::len);
        if states.iter().any(|s| s.len() != dim) {
            return Err(Error::Data("state vectors have differing dimensions".into()));
        }
        let flat = states.into_iter().flatten().collect();
        Self::from_flat(flat, dim, actions, outcome, terminal_entry)
    }

    /// Builds a trajectory from row-major states of dimension `dim`.
    pub fn from_flat(
        states: Vec<f64>,
        dim: usize,
        actions: Vec<usize>,
        outcome: f64,
        terminal_entry: Option<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("state dimension must be positive".into()));
        }
        if actions.is_empty() {
            return Err(Error::Data("trajectory has no time steps".into()));
        }
        if states.len() != dim * actions.len() {
            return Err(Error::Data(format!(
                "expected {} state values for T={} and d={}, got {}",
                dim * actions.len(),
                actions.len(),
                dim,
                states.len()
            )));
        }
        if let Some(e) = terminal_entry {
            if e == 0 || e > actions.len() {
                return Err(Error::Data(format!("terminal entry {e} outside 1..={}", actions.len())));
            }
        }
        Ok(Self { states, dim, actions, outcome, terminal_entry })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    /// State `S_t` for `t` in `1..=T`.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[(t - 1) * self.dim..t * self.dim]
    }

    /// Action `A_t` for `t` in `1..=T`.
    pub fn action(&self, t: usize) -> usize {
        self.actions[t - 1]
    }

    /// Action `A_t`, or `None` past the horizon.
    pub fn action_opt(&self, t: usize) -> Option<usize> {
        (t >= 1 && t <= self.actions.len()).then(|| self.actions[t - 1])
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn outcome(&self) -> f64 {
        self.outcome
    }

    pub fn terminal_entry(&self) -> Option<usize> {
        self.terminal_entry
    }

    /// Whether `S_t` is the terminal state.
    pub fn is_terminal_at(&self, t: usize) -> bool {
        self.terminal_entry.is_some_and(|e| t >= e)
    }

    /// `1{A_{1:t-1} = 0}`.
    pub fn untreated_before(&self, t: usize) -> bool {
        self.actions[..t - 1].iter().all(|&a| a == 0)
    }

    /// First nonzero action as `(time, arm)`.
    pub fn first_treatment(&self) -> Option<(usize, usize)> {
        self.actions.iter().position(|&a| a != 0).map(|p| (p + 1, self.actions[p]))
    }

    /// View of the prefix `S_{1:t}`.
    pub fn history(&self, t: usize) -> History<'_> {
        History::new(&self.states[..t * self.dim], self.dim, self.horizon())
    }
}

/// Borrowed view of a state prefix `S_{1:t}`.
#[derive(Clone, Copy, Debug)]
pub struct History<'a> {
    data: &'a [f64],
    dim: usize,
    horizon: usize,
}

impl<'a> History<'a> {
    /// `data` holds `t * dim` values; `horizon` is the full trajectory length `T`.
    pub fn new(data: &'a [f64], dim: usize, horizon: usize) -> Self {
        debug_assert!(dim > 0 && data.len() % dim == 0);
        Self { data, dim, horizon }
    }

    /// Current time `t` (number of states in the prefix).
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state(&self, t: usize) -> &'a [f64] {
        &self.data[(t - 1) * self.dim..t * self.dim]
    }

    pub fn current(&self) -> &'a [f64] {
        self.state(self.len())
    }

    pub fn prefix(&self, t: usize) -> History<'a> {
        History::new(&self.data[..t * self.dim], self.dim, self.horizon)
    }

    pub fn raw(&self) -> &'a [f64] {
        self.data
    }
}

// ---------------------------------------------------------------------------
// Terminal states
// ---------------------------------------------------------------------------

/// Known outcome function `H_t(S_{1:t})` for trajectories that hit the terminal state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TerminalOutcome {
    /// `H_t = t`: the outcome is the number of time steps survived.
    SurvivalTime,
}

impl TerminalOutcome {
    /// `H_t` evaluated on a prefix of length `t` (the last non-terminal time).
    pub fn evaluate(&self, t: usize) -> f64 {
        match self {
            TerminalOutcome::SurvivalTime => t as f64,
        }
    }
}

/// Encoding of the absorbing terminal state `Φ` and its outcome function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalSpec {
    /// Every coordinate of a terminal state equals this constant.
    pub sentinel: f64,
    pub outcome: TerminalOutcome,
}

impl TerminalSpec {
    pub fn survival(sentinel: f64) -> Self {
        Self { sentinel, outcome: TerminalOutcome::SurvivalTime }
    }

    pub fn is_terminal_state(&self, s: &[f64]) -> bool {
        is_sentinel(s, self.sentinel)
    }
}

pub(crate) fn is_sentinel(s: &[f64], sentinel: f64) -> bool {
    s.iter().all(|&v| v == sentinel)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// A validated collection of trajectories sharing `T`, `K` and `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    horizon: usize,
    num_arms: usize,
    state_dim: usize,
    terminal: Option<TerminalSpec>,
    staggered: bool,
    /// Row-major `n x T x (K+1)` behavior probabilities for never-treated histories.
    true_propensities: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        num_arms: usize,
        terminal: Option<TerminalSpec>,
        staggered: bool,
    ) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Data("dataset has no trajectories".into()))?;
        if num_arms == 0 {
            return Err(Error::Data("number of arms K must be at least 1".into()));
        }
        let (horizon, state_dim) = (first.horizon(), first.state_dim());
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.horizon() != horizon {
                return Err(Error::Data(format!(
                    "inconsistent horizon: trajectory {i} has T={} but trajectory 0 has T={horizon}",
                    tr.horizon()
                )));
            }
            if tr.state_dim() != state_dim {
                return Err(Error::Data(format!(
                    "inconsistent state dimension at trajectory {i}: {} vs {state_dim}",
                    tr.state_dim()
                )));
            }
            for (t, &a) in tr.actions.iter().enumerate() {
                if a > num_arms {
                    return Err(Error::ActionOutOfRange { traj: i, t: t + 1, action: a, num_arms });
                }
            }
            if let Some(e) = tr.terminal_entry {
                let spec = terminal.ok_or_else(|| {
                    Error::Data(format!("trajectory {i} has a terminal entry but no terminal spec"))
                })?;
                for t in e..=horizon {
                    if !spec.is_terminal_state(tr.state(t)) {
                        return Err(Error::Data(format!(
                            "trajectory {i}: state at t={t} after terminal entry {e} is not the terminal encoding"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            trajectories,
            horizon,
            num_arms,
            state_dim,
            terminal,
            staggered,
            true_propensities: None,
        })
    }

    /// Attaches behavior probabilities, row-major `n x T x (K+1)`.
    pub fn with_true_propensities(mut self, probs: Vec<f64>) -> Result<Self> {
        let width = self.num_arms + 1;
        if probs.len() != self.n() * self.horizon * width {
            return Err(Error::Data(format!(
                "true propensity table has {} entries, expected {}",
                probs.len(),
                self.n() * self.horizon * width
            )));
        }
        for (row, chunk) in probs.chunks(width).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if chunk.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "true propensities at trajectory {}, t={} do not form a distribution",
                    row / self.horizon,
                    row % self.horizon + 1
                )));
            }
        }
        self.true_propensities = Some(probs);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn terminal(&self) -> Option<&TerminalSpec> {
        self.terminal.as_ref()
    }

    pub fn staggered(&self) -> bool {
        self.staggered
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn trajectory(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    pub fn has_true_propensities(&self) -> bool {
        self.true_propensities.is_some()
    }

    /// Behavior probability of action `a` at time `t` for a never-treated history.
    pub fn true_propensity(&self, i: usize, t: usize, a: usize) -> Option<f64> {
        let w = self.num_arms + 1;
        self.true_propensities
            .as_ref()
            .map(|p| p[(i * self.horizon + t - 1) * w + a])
    }

    pub fn true_propensity_table(&self) -> Option<&[f64]> {
        self.true_propensities.as_deref()
    }

    /// Subset of trajectories (and their true propensities) by index.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let trajs = idx.iter().map(|&i| self.trajectories[i].clone()).collect();
        let mut out = Self::new(trajs, self.num_arms, self.terminal, self.staggered)?;
        if let Some(p) = &self.true_propensities {
            let block = self.horizon * (self.num_arms + 1);
            let sub = idx.iter().flat_map(|&i| p[i * block..(i + 1) * block].iter().copied());
            out.true_propensities = Some(sub.collect());
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Empirical frequency of one action at one time among never-treated, non-terminal histories.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapCell {
    pub t: usize,
    pub action: usize,
    pub count: usize,
    pub at_risk: usize,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Violation {
    /// A treated trajectory changed its action before reaching the terminal state.
    Staggered { traj: usize, t: usize },
    /// A nonzero action was recorded at a terminal time.
    ActionAtTerminal { traj: usize, t: usize },
    /// `Y != H_t` on a terminated trajectory.
    TerminalOutcome { traj: usize, expected: f64, found: f64 },
}

/// Report-only summary produced by [`validate_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub overlap_floor: f64,
    pub cells: Vec<OverlapCell>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// Cells whose empirical frequency falls below the floor.
    pub fn overlap_flags(&self) -> Vec<&OverlapCell> {
        self.cells.iter().filter(|c| c.frequency < self.overlap_floor).collect()
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.overlap_flags().is_empty()
    }
}

/// Reports action frequencies among never-treated histories and flags violations.
///
/// Staggered-adoption checks only run when the dataset carries the staggered flag.
pub fn validate_dataset(ds: &Dataset, overlap_floor: f64) -> ValidationReport {
    let (t_max, k) = (ds.horizon(), ds.num_arms());
    let mut counts = vec![0usize; t_max * (k + 1)];
    let mut at_risk = vec![0usize; t_max];
    let mut violations = Vec::new();
    for (i, tr) in ds.trajectories().iter().enumerate() {
        for t in 1..=t_max {
            if !tr.untreated_before(t) || tr.is_terminal_at(t) {
                continue;
            }
            at_risk[t - 1] += 1;
            counts[(t - 1) * (k + 1) + tr.action(t)] += 1;
        }
        for t in 1..=t_max {
            if tr.is_terminal_at(t) && tr.action(t) != 0 {
                violations.push(Violation::ActionAtTerminal { traj: i, t });
            }
        }
        if ds.staggered() {
            if let Some((start, arm)) = tr.first_treatment() {
                let bad = (start + 1..=t_max)
                    .find(|&t| !tr.is_terminal_at(t) && tr.action(t) != arm);
                if let Some(t) = bad {
                    violations.push(Violation::Staggered { traj: i, t });
                }
            }
        }
        if let (Some(spec), Some(e)) = (ds.terminal(), tr.terminal_entry()) {
            let expected = spec.outcome.evaluate(e - 1);
            if tr.outcome() != expected {
                violations.push(Violation::TerminalOutcome { traj: i, expected, found: tr.outcome() });
            }
        }
    }
    let mut cells = Vec::with_capacity(counts.len());
    for t in 1..=t_max {
        for a in 0..=k {
            let count = counts[(t - 1) * (k + 1) + a];
            let risk = at_risk[t - 1];
            let frequency = if risk == 0 { 0.0 } else { count as f64 / risk as f64 };
            cells.push(OverlapCell { t, action: a, count, at_risk: risk, frequency });
        }
    }
    ValidationReport { overlap_floor, cells, violations }
}

// ---------------------------------------------------------------------------
// Cross-fitting folds
// ---------------------------------------------------------------------------

/// Balanced assignment of trajectories to `Q` folds (fold ids `0..Q`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    num_folds: usize,
    assignment: Vec<usize>,
}

impl FoldPlan {
    /// Builds a plan from an explicit assignment.
    pub fn from_assignment(num_folds: usize, assignment: Vec<usize>) -> Result<Self> {
        if num_folds < 2 {
            return Err(invalid(format!("need at least 2 folds, got {num_folds}")));
        }
        if let Some(&bad) = assignment.iter().find(|&&q| q >= num_folds) {
            return Err(invalid(format!("fold id {bad} out of range for {num_folds} folds")));
        }
        Ok(Self { num_folds, assignment })
    }

    pub fn num_folds(&self) -> usize {
        self.num_folds
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Indices in fold `q`.
    pub fn members(&self, q: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == q).collect()
    }

    /// Indices outside fold `q`.
    pub fn complement(&self, q: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != q).collect()
    }
}

/// Deterministic balanced fold assignment for `n` trajectories.
pub fn assign_folds(n: usize, q: usize, seed: u64) -> Result<FoldPlan> {
    if q < 2 || q > n {
        return Err(invalid(format!("fold count must satisfy 2 <= Q <= n, got Q={q}, n={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = rank % q;
    }
    Ok(FoldPlan { num_folds: q, assignment })
}

// ---------------------------------------------------------------------------
// History features
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// `S_t` only.
    CurrentState,
    /// `S_{t-m+1:t}`, missing early lags padded with zeros.
    LastStates(usize),
    /// `S_{1:t}` followed by zeros up to length `T*d`.
    FullHistory,
}

/// How a state prefix `S_{1:t}` is turned into a regression feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub mode: FeatureMode,
    pub include_time: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { mode: FeatureMode::CurrentState, include_time: false }
    }
}

/// Value used for lags before `t = 1`.
pub const FEATURE_PAD: f64 = 0.0;

impl FeatureSpec {
    pub fn current() -> Self {
        Self::default()
    }

    /// Length of the emitted vector for state dimension `d` and horizon `T`.
    pub fn len(&self, d: usize, horizon: usize) -> usize {
        let states = match self.mode {
            FeatureMode::CurrentState => d,
            FeatureMode::LastStates(m) => m * d,
            FeatureMode::FullHistory => horizon * d,
        };
        states + usize::from(self.include_time)
    }

    /// Appends the features of `h` to `out`.
    pub fn extend(&self, h: History<'_>, out: &mut Vec<f64>) {
        let (t, d) = (h.len(), h.dim());
        match self.mode {
            FeatureMode::CurrentState => out.extend_from_slice(h.current()),
            FeatureMode::LastStates(m) => {
                for lag in (0..m).rev() {
                    if lag < t {
                        out.extend_from_slice(h.state(t - lag));
                    } else {
                        out.extend(std::iter::repeat_n(FEATURE_PAD, d));
                    }
                }
            }
            FeatureMode::FullHistory => {
                out.extend_from_slice(h.raw());
                out.extend(std::iter::repeat_n(FEATURE_PAD, (h.horizon() - t) * d));
            }
        }
        if self.include_time {
            out.push(t as f64);
        }
    }

    pub fn extract(&self, h: History<'_>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len(h.dim(), h.horizon()));
        self.extend(h, &mut out);
        out
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            FeatureMode::CurrentState => write!(f, "current")?,
            FeatureMode::LastStates(m) => write!(f, "last:{m}")?,
            FeatureMode::FullHistory => write!(f, "full")?,
        }
        if self.include_time {
            write!(f, "+time")?;
        }
        Ok(())
    }
}

impl FromStr for FeatureSpec {
    type Err = Error;

    /// Parses `current`, `last:<m>` or `full`, optionally suffixed with `+time`.
    fn from_str(s: &str) -> Result<Self> {
        let (body, include_time) = match s.strip_suffix("+time") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let mode = match body {
            "current" => FeatureMode::CurrentState,
            "full" => FeatureMode::FullHistory,
            _ => match body.strip_prefix("last:").map(str::parse::<usize>) {
                Some(Ok(m)) if m > 0 => FeatureMode::LastStates(m),
                _ => return Err(invalid(format!("unknown feature spec '{s}'"))),
            },
        };
        Ok(Self { mode, include_time })
    }
}

/// Feature vector of the prefix `S_{1:t}` of `traj`.
pub fn history_features(traj: &Trajectory, t: usize, spec: &FeatureSpec) -> Result<Vec<f64>> {
    if t == 0 || t > traj.horizon() {
        return Err(invalid(format!("time index {t} outside 1..={}", traj.horizon())));
    }
    Ok(spec.extract(traj.history(t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_traj(states: &[f64], actions: &[usize], y: f64) -> Trajectory {
        Trajectory::from_flat(states.to_vec(), 1, actions.to_vec(), y, None).unwrap()
    }

    #[test]
    fn current_state_with_time() {
        let tr = scalar_traj(&[0.1, 0.2, 0.7], &[0, 0, 0], 1.0);
        let spec = FeatureSpec { mode: FeatureMode::CurrentState, include_time: true };
        assert_eq!(history_features(&tr, 3, &spec).unwrap(), vec![0.7, 3.0]);
    }

    #[test]
    fn full_history_features() {
        let tr = scalar_traj(&[1.0, 2.0], &[0, 0], 1.0);
        let spec = FeatureSpec { mode: FeatureMode::FullHistory, include_time: true };
        assert_eq!(history_features(&tr, 2, &spec).unwrap(), vec![1.0, 2.0, 2.0]);
        assert_eq!(history_features(&tr, 1, &spec).unwrap(), vec![1.0, FEATURE_PAD, 1.0]);
    }

    #[test]
    fn lagged_features_pad_early_times() {
        let tr = scalar_traj(&[5.0, 6.0, 7.0], &[0, 0, 0], 1.0);
        let spec = FeatureSpec { mode: FeatureMode::LastStates(2), include_time: true };
        assert_eq!(history_features(&tr, 1, &spec).unwrap(), vec![FEATURE_PAD, 5.0, 1.0]);
        assert_eq!(history_features(&tr, 3, &spec).unwrap(), vec![6.0, 7.0, 3.0]);
    }

    #[test]
    fn feature_length_is_fixed_per_spec() {
        let tr = Trajectory::new(vec![vec![1.0, 2.0]; 4], vec![0; 4], 0.0, None).unwrap();
        for spec in ["current", "last:3+time", "full", "full+time"] {
            let spec: FeatureSpec = spec.parse().unwrap();
            for t in 1..=4 {
                assert_eq!(history_features(&tr, t, &spec).unwrap().len(), spec.len(2, 4));
            }
        }
    }

    #[test]
    fn feature_time_out_of_range() {
        let tr = scalar_traj(&[1.0], &[0], 0.0);
        assert!(history_features(&tr, 0, &FeatureSpec::default()).is_err());
        assert!(history_features(&tr, 2, &FeatureSpec::default()).is_err());
    }

    #[test]
    fn feature_spec_round_trips_through_text() {
        for s in ["current", "current+time", "last:4", "full+time"] {
            assert_eq!(s.parse::<FeatureSpec>().unwrap().to_string(), s);
        }
        assert!("last:0".parse::<FeatureSpec>().is_err());
    }

    #[test]
    fn folds_balanced() {
        let plan = assign_folds(10, 5, 3).unwrap();
        for q in 0..5 {
            assert_eq!(plan.members(q).len(), 2);
        }
        let plan = assign_folds(13, 5, 3).unwrap();
        let sizes: Vec<usize> = (0..5).map(|q| plan.members(q).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn folds_reject_bad_counts() {
        assert!(assign_folds(10, 1, 0).is_err());
        assert!(assign_folds(3, 4, 0).is_err());
    }

    #[test]
    fn folds_deterministic() {
        assert_eq!(assign_folds(50, 5, 9).unwrap(), assign_folds(50, 5, 9).unwrap());
        assert_ne!(assign_folds(50, 5, 9).unwrap(), assign_folds(50, 5, 10).unwrap());
    }

    #[test]
    fn dataset_rejects_out_of_range_action() {
        let tr = scalar_traj(&[0.0, 0.0], &[0, 5], 0.0);
        let err = Dataset::new(vec![tr], 2, None, false).unwrap_err();
        assert!(matches!(err, Error::ActionOutOfRange { action: 5, .. }));
    }

    #[test]
    fn dataset_rejects_inconsistent_horizon() {
        let a = scalar_traj(&[0.0, 0.0], &[0, 0], 0.0);
        let b = scalar_traj(&[0.0], &[0], 0.0);
        assert!(Dataset::new(vec![a, b], 1, None, false).is_err());
    }

    #[test]
    fn dataset_requires_absorbing_terminal_encoding() {
        let spec = TerminalSpec::survival(-1.0);
        let ok = scalar_traj(&[0.3, -1.0, -1.0], &[0, 0, 0], 1.0);
        let ok = Trajectory { terminal_entry: Some(2), ..ok };
        assert!(Dataset::new(vec![ok], 1, Some(spec), false).is_ok());
        let bad = Trajectory { terminal_entry: Some(2), ..scalar_traj(&[0.3, -1.0, 0.5], &[0; 3], 1.0) };
        assert!(Dataset::new(vec![bad], 1, Some(spec), false).is_err());
    }

    #[test]
    fn validation_flags_empty_cell() {
        let trajs = vec![
            scalar_traj(&[0.0; 3], &[0, 1, 1], 0.0),
            scalar_traj(&[0.0; 3], &[0, 0, 1], 0.0),
            scalar_traj(&[0.0; 3], &[0, 0, 0], 0.0),
        ];
        let ds = Dataset::new(trajs, 2, None, false).unwrap();
        let report = validate_dataset(&ds, 0.01);
        let flags = report.overlap_flags();
        assert!(flags.iter().any(|c| c.t == 3 && c.action == 2 && c.frequency == 0.0));
    }

    #[test]
    fn validation_flags_staggered_reversion() {
        let trajs = vec![scalar_traj(&[0.0; 3], &[1, 0, 1], 0.0)];
        let ds = Dataset::new(trajs.clone(), 1, None, true).unwrap();
        let report = validate_dataset(&ds, 0.0);
        assert_eq!(report.violations, vec![Violation::Staggered { traj: 0, t: 2 }]);
        let lax = Dataset::new(trajs, 1, None, false).unwrap();
        assert!(validate_dataset(&lax, 0.0).violations.is_empty());
    }

    #[test]
    fn validation_checks_terminal_outcome_identity() {
        let spec = TerminalSpec::survival(-1.0);
        let good = Trajectory { terminal_entry: Some(3), ..scalar_traj(&[1.0, 1.0, -1.0], &[0; 3], 2.0) };
        let bad = Trajectory { terminal_entry: Some(3), ..scalar_traj(&[1.0, 1.0, -1.0], &[0; 3], 5.0) };
        let ds = Dataset::new(vec![good, bad], 1, Some(spec), false).unwrap();
        let report = validate_dataset(&ds, 0.0);
        assert_eq!(
            report.violations,
            vec![Violation::TerminalOutcome { traj: 1, expected: 2.0, found: 5.0 }]
        );
    }

    #[test]
    fn true_propensities_must_be_distributions() {
        let ds = Dataset::new(vec![scalar_traj(&[0.0], &[0], 0.0)], 1, None, false).unwrap();
        assert!(ds.clone().with_true_propensities(vec![0.4, 0.6]).is_ok());
        assert!(ds.with_true_propensities(vec![0.4, 0.4]).is_err());
    }
}
