//! Regular when-to-treat policies, linear thresholding classes and their grids.
//!
//! A regular policy waits (action 0) until its start rule fires at `τ`, then
//! applies the chosen arm `W` at every later time. Policies attached to a
//! terminal sentinel return 0 whenever the current state is terminal.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{is_sentinel, Dataset, History, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::provenance::Provenance;

/// A regular when-to-treat policy, described by its start rule.
pub trait WhenToTreatPolicy: Send + Sync {
    /// Arm to start at time `t = h.len()` on a never-treated prefix `S_{1:t}`, or 0 to wait.
    fn start_arm(&self, h: History<'_>) -> usize;

    /// Sentinel value of the terminal state this policy respects.
    fn terminal_sentinel(&self) -> Option<f64> {
        None
    }

    /// Human-readable identifier.
    fn label(&self) -> String;
}

fn at_terminal<P: WhenToTreatPolicy + ?Sized>(p: &P, s: &[f64]) -> bool {
    p.terminal_sentinel().is_some_and(|v| is_sentinel(s, v))
}

/// Action prescribed at time `t = states.len()` given `A_{1:t-1}`.
pub fn decide<P: WhenToTreatPolicy + ?Sized>(
    policy: &P,
    states: History<'_>,
    actions: &[usize],
) -> Result<usize> {
    let t = states.len();
    if t == 0 || actions.len() + 1 != t {
        return Err(invalid(format!(
            "inconsistent prefixes: {t} states but {} actions",
            actions.len()
        )));
    }
    if at_terminal(policy, states.current()) {
        return Ok(0);
    }
    if let Some(&last) = actions.last() {
        if last != 0 {
            return Ok(last);
        }
    }
    let (tau, arm) = stopping_time_prefix(policy, states);
    Ok(if tau <= t { arm } else { 0 })
}

/// First firing of the start rule along `S_{1:t}`; `(t+1, 0)` if it never fires.
fn stopping_time_prefix<P: WhenToTreatPolicy + ?Sized>(policy: &P, h: History<'_>) -> (usize, usize) {
    for t in 1..=h.len() {
        if at_terminal(policy, h.state(t)) {
            break;
        }
        let arm = policy.start_arm(h.prefix(t));
        if arm != 0 {
            return (t, arm);
        }
    }
    (h.len() + 1, 0)
}

/// `(τ_π, W_π)` along the never-treated counterfactual prefix of `states`.
///
/// Returns `(T+1, 0)` when the policy never starts within the horizon.
pub fn stopping_time<P: WhenToTreatPolicy + ?Sized>(policy: &P, states: History<'_>) -> (usize, usize) {
    stopping_time_prefix(policy, states)
}

/// `(τ_π, W_π)` for a full trajectory.
pub fn trajectory_stopping_time<P: WhenToTreatPolicy + ?Sized>(policy: &P, tr: &Trajectory) -> (usize, usize) {
    stopping_time_prefix(policy, tr.history(tr.horizon()))
}

/// `(τ_π, W_π)` for a trajectory, treating its recorded terminal entry as
/// terminal even when the policy carries no sentinel.
pub fn observed_stopping_time<P: WhenToTreatPolicy + ?Sized>(policy: &P, tr: &Trajectory) -> (usize, usize) {
    let (tau, arm) = trajectory_stopping_time(policy, tr);
    match tr.terminal_entry() {
        Some(entry) if tau >= entry => (tr.horizon() + 1, 0),
        _ => (tau, arm),
    }
}

// ---------------------------------------------------------------------------
// Policy vectors
// ---------------------------------------------------------------------------

/// One-hot vector of length `KT+1` with the hot entry at `K(τ-1)+W` (1-based),
/// or at `KT+1` for a policy that never starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PolicyVector {
    hot: usize,
    len: usize,
}

impl PolicyVector {
    pub fn new(tau: usize, arm: usize, num_arms: usize, horizon: usize) -> Self {
        let len = num_arms * horizon + 1;
        let hot = if tau <= horizon && arm != 0 {
            num_arms * (tau - 1) + arm
        } else {
            len
        };
        Self { hot, len }
    }

    /// 1-based index of the hot entry.
    pub fn hot_index(&self) -> usize {
        self.hot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_dense(&self) -> Vec<u8> {
        let mut v = vec![0; self.len];
        v[self.hot - 1] = 1;
        v
    }
}

/// Policy vector `π(H)` of a trajectory (terminal entries stop the policy).
pub fn policy_vector<P: WhenToTreatPolicy + ?Sized>(
    policy: &P,
    tr: &Trajectory,
    num_arms: usize,
) -> PolicyVector {
    let (tau, arm) = observed_stopping_time(policy, tr);
    PolicyVector::new(tau, arm, num_arms, tr.horizon())
}

/// Fraction of trajectories on which two policies have different policy vectors.
pub fn hamming_distance<P, Q>(a: &P, b: &Q, ds: &Dataset) -> f64
where
    P: WhenToTreatPolicy + ?Sized,
    Q: WhenToTreatPolicy + ?Sized,
{
    let k = ds.num_arms();
    let differ = ds
        .trajectories()
        .iter()
        .filter(|tr| policy_vector(a, tr, k) != policy_vector(b, tr, k))
        .count();
    differ as f64 / ds.n() as f64
}

// ---------------------------------------------------------------------------
// Linear thresholding policies
// ---------------------------------------------------------------------------

/// Affine rule `w·s + w_t·t >= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub state_weights: Vec<f64>,
    pub time_weight: f64,
    pub threshold: f64,
}

impl Hyperplane {
    pub fn fires(&self, s: &[f64], t: usize) -> bool {
        let lhs: f64 = self.state_weights.iter().zip(s).map(|(w, x)| w * x).sum::<f64>()
            + self.time_weight * t as f64;
        lhs >= self.threshold
    }
}

/// How the arm is chosen once the start rule fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ArmRule {
    Fixed(usize),
    /// `above` when the hyperplane fires, `below` otherwise.
    Split { plane: Hyperplane, above: usize, below: usize },
}

/// Parameterization family of a linear thresholding policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyClass {
    Never,
    BinaryTime,
    BinaryState,
    BinaryMixed,
    MultiNonInvasive,
    MultiInvasive,
    MultiMixed,
    MultiMixedNegative,
}

impl PolicyClass {
    pub const ALL: [PolicyClass; 8] = [
        PolicyClass::Never,
        PolicyClass::BinaryTime,
        PolicyClass::BinaryState,
        PolicyClass::BinaryMixed,
        PolicyClass::MultiNonInvasive,
        PolicyClass::MultiInvasive,
        PolicyClass::MultiMixed,
        PolicyClass::MultiMixedNegative,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            PolicyClass::Never => "never",
            PolicyClass::BinaryTime => "bin-time",
            PolicyClass::BinaryState => "bin-state",
            PolicyClass::BinaryMixed => "bin-mixed",
            PolicyClass::MultiNonInvasive => "multi-noninvasive",
            PolicyClass::MultiInvasive => "multi-invasive",
            PolicyClass::MultiMixed => "multi-mixed",
            PolicyClass::MultiMixedNegative => "multi-mixed-neg",
        }
    }

    /// Number of parameters in the tuple.
    pub fn arity(&self) -> usize {
        match self {
            PolicyClass::Never => 0,
            PolicyClass::BinaryTime | PolicyClass::BinaryState | PolicyClass::BinaryMixed => 3,
            _ => 8,
        }
    }
}

impl FromStr for PolicyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyClass::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| invalid(format!("unknown policy class '{s}'")))
    }
}

impl fmt::Display for PolicyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Start when a hyperplane in `(state, t)` fires; pick the arm by a fixed
/// choice or a second hyperplane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearThresholdPolicy {
    class: PolicyClass,
    params: Vec<f64>,
    start: Hyperplane,
    arm: ArmRule,
    terminal_sentinel: Option<f64>,
}

impl LinearThresholdPolicy {
    /// General constructor; `params` is only used for identification and ordering.
    pub fn new(class: PolicyClass, params: Vec<f64>, start: Hyperplane, arm: ArmRule) -> Self {
        Self { class, params, start, arm, terminal_sentinel: None }
    }

    /// The policy that never starts treatment.
    pub fn never() -> Self {
        let start = Hyperplane { state_weights: Vec::new(), time_weight: 0.0, threshold: 1.0 };
        Self::new(PolicyClass::Never, Vec::new(), start, ArmRule::Fixed(1))
    }

    /// Binary-setup rule: start arm 1 (stop) when `θ1·S_t >= θ2·t + θ3`.
    pub fn binary(theta1: f64, theta2: f64, theta3: f64) -> Self {
        let class = if theta1 == 0.0 {
            PolicyClass::BinaryTime
        } else if theta2 == 0.0 {
            PolicyClass::BinaryState
        } else {
            PolicyClass::BinaryMixed
        };
        Self::binary_with_class(class, theta1, theta2, theta3)
    }

    fn binary_with_class(class: PolicyClass, theta1: f64, theta2: f64, theta3: f64) -> Self {
        let start = Hyperplane { state_weights: vec![theta1], time_weight: -theta2, threshold: theta3 };
        Self::new(class, vec![theta1, theta2, theta3], start, ArmRule::Fixed(1))
    }

    /// Multi-arm rule on `(X', Y')`: start when `θ1 X' + θ2 Y' + θ3 t >= θ4`;
    /// invasive arm 2 when additionally `θ5 X' + θ6 Y' + θ7 t >= θ8`, else arm 1.
    pub fn multi(theta: [f64; 8]) -> Self {
        let class = if theta[0] == 0.0 && theta[1] == 0.0 {
            if theta[6] == 1.0 && theta[7] == 0.0 {
                PolicyClass::MultiInvasive
            } else {
                PolicyClass::MultiNonInvasive
            }
        } else if theta[4] < 0.0 {
            PolicyClass::MultiMixedNegative
        } else {
            PolicyClass::MultiMixed
        };
        Self::multi_with_class(class, theta)
    }

    fn multi_with_class(class: PolicyClass, theta: [f64; 8]) -> Self {
        let start = Hyperplane { state_weights: vec![theta[0], theta[1]], time_weight: theta[2], threshold: theta[3] };
        let plane = Hyperplane { state_weights: vec![theta[4], theta[5]], time_weight: theta[6], threshold: theta[7] };
        Self::new(class, theta.to_vec(), start, ArmRule::Split { plane, above: 2, below: 1 })
    }

    /// Builds a policy from its class tag and parameter tuple.
    pub fn from_tagged(class: PolicyClass, params: &[f64]) -> Result<Self> {
        if params.len() != class.arity() {
            return Err(invalid(format!(
                "class {class} takes {} parameters, got {}",
                class.arity(),
                params.len()
            )));
        }
        Ok(match class {
            PolicyClass::Never => Self::never(),
            PolicyClass::BinaryTime | PolicyClass::BinaryState | PolicyClass::BinaryMixed => {
                Self::binary_with_class(class, params[0], params[1], params[2])
            }
            _ => {
                let mut theta = [0.0; 8];
                theta.copy_from_slice(params);
                Self::multi_with_class(class, theta)
            }
        })
    }

    /// Same policy, additionally respecting the terminal state encoded by `sentinel`.
    pub fn respecting_terminal(mut self, sentinel: f64) -> Self {
        self.terminal_sentinel = Some(sentinel);
        self
    }

    pub fn class(&self) -> PolicyClass {
        self.class
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Lexicographic order on `(class arity, params)` using total float order.
    pub fn cmp_params(&self, other: &Self) -> Ordering {
        for (a, b) in self.params.iter().zip(&other.params) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        self.params.len().cmp(&other.params.len())
    }
}

impl WhenToTreatPolicy for LinearThresholdPolicy {
    fn start_arm(&self, h: History<'_>) -> usize {
        let (s, t) = (h.current(), h.len());
        if !self.start.fires(s, t) {
            return 0;
        }
        match &self.arm {
            ArmRule::Fixed(k) => *k,
            ArmRule::Split { plane, above, below } => {
                if plane.fires(s, t) {
                    *above
                } else {
                    *below
                }
            }
        }
    }

    fn terminal_sentinel(&self) -> Option<f64> {
        self.terminal_sentinel
    }

    fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LinearThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.class)?;
        if !self.params.is_empty() {
            let p: Vec<String> = self.params.iter().map(f64::to_string).collect();
            write!(f, ":{}", p.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for LinearThresholdPolicy {
    type Err = Error;

    /// Parses `tag` or `tag:θ1,θ2,...`, e.g. `bin-time:0,-1,3`.
    fn from_str(s: &str) -> Result<Self> {
        let (tag, rest) = s.split_once(':').unwrap_or((s, ""));
        let class: PolicyClass = tag.trim().parse()?;
        let params = if rest.trim().is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| invalid(format!("bad parameter '{v}' in '{s}'"))))
                .collect::<Result<Vec<_>>>()?
        };
        Self::from_tagged(class, &params)
    }
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

/// Duplicate-free list of policies in lexicographic parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyGrid {
    policies: Vec<LinearThresholdPolicy>,
}

impl PolicyGrid {
    /// Sorts lexicographically and removes duplicate parameter tuples.
    pub fn new(mut policies: Vec<LinearThresholdPolicy>) -> Self {
        policies.sort_by(|a, b| a.cmp_params(b));
        policies.dedup_by(|a, b| a.cmp_params(b) == Ordering::Equal);
        Self { policies }
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn policies(&self) -> &[LinearThresholdPolicy] {
        &self.policies
    }

    pub fn get(&self, i: usize) -> &LinearThresholdPolicy {
        &self.policies[i]
    }

    /// Every policy additionally respects the terminal state.
    pub fn respecting_terminal(self, sentinel: f64) -> Self {
        let policies = self.policies.into_iter().map(|p| p.respecting_terminal(sentinel)).collect();
        Self { policies }
    }

    /// Writes `class,theta_1,...` rows.
    pub fn save(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write(&mut w, prov)?;
        w.flush()?;
        Ok(())
    }

    /// Same layout as [`PolicyGrid::save`], to any writer.
    pub fn write<W: Write>(&self, w: &mut W, prov: &Provenance) -> Result<()> {
        writeln!(w, "{}", prov.header())?;
        let arity = self.policies.iter().map(|p| p.params.len()).max().unwrap_or(0);
        let cols: Vec<String> = (1..=arity).map(|j| format!("theta_{j}")).collect();
        writeln!(w, "class,{}", cols.join(","))?;
        for p in &self.policies {
            let mut fields: Vec<String> = p.params.iter().map(f64::to_string).collect();
            fields.resize(arity, String::new());
            writeln!(w, "{},{}", p.class, fields.join(","))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).flexible(true).from_path(path)?;
        let mut policies = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
            let class: PolicyClass = rec.get(0).unwrap_or("").parse().map_err(|e: Error| perr(e.to_string()))?;
            let params = rec
                .iter()
                .skip(1)
                .filter(|v| !v.trim().is_empty())
                .map(|v| v.trim().parse::<f64>().map_err(|_| perr(format!("bad parameter '{v}'"))))
                .collect::<Result<Vec<_>>>()?;
            policies.push(LinearThresholdPolicy::from_tagged(class, &params).map_err(|e| perr(e.to_string()))?);
        }
        Ok(Self::new(policies))
    }
}

/// Grid of the binary (when-to-stop) setup: 11 time-only, 12 state-only and
/// 105 mixed policies.
pub fn binary_grid() -> PolicyGrid {
    let horizon = 10;
    let mut out = Vec::new();
    for th3 in 1..=horizon + 1 {
        out.push(LinearThresholdPolicy::binary(0.0, -1.0, th3 as f64));
    }
    for j in 0..12 {
        out.push(LinearThresholdPolicy::binary(1.0, 0.0, -0.5 + 0.5 * j as f64));
    }
    for th2 in [-1.0 / 4.0, -1.0 / 3.0, -1.0 / 2.0, -1.0, -2.0, -3.0, -4.0] {
        for th3 in 1..=15 {
            out.push(LinearThresholdPolicy::binary(1.0, th2, th3 as f64));
        }
    }
    PolicyGrid::new(out)
}

/// Grid of the multi-arm setup: 11 always-non-invasive, 11 always-invasive,
/// 2500 mixed and 400 mixed policies with a negative `X'` weight.
pub fn multi_grid() -> PolicyGrid {
    let horizon = 10;
    let mut out = Vec::new();
    for th4 in 1..=horizon + 1 {
        let th4 = th4 as f64;
        out.push(LinearThresholdPolicy::multi([0.0, 0.0, 1.0, th4, 0.0, 0.0, 0.0, 1.0]));
        out.push(LinearThresholdPolicy::multi([0.0, 0.0, 1.0, th4, 0.0, 0.0, 1.0, 0.0]));
    }
    let th1s = [0.2, 0.7, 1.0, 3.0, 5.0];
    let odd = [1.0, 3.0, 5.0, 7.0, 9.0];
    for th1 in th1s {
        for th3 in [0.0, 1.0] {
            for th4 in odd {
                for th7 in [0.0, 1.0] {
                    for th5 in [0.1, 0.35, 0.5, 1.5, 2.5] {
                        for th8 in odd {
                            out.push(LinearThresholdPolicy::multi([th1, 1.0, th3, th4, th5, 1.0, th7, th8]));
                        }
                    }
                    for th8 in [-5.0, -2.0, 1.0, 4.0] {
                        out.push(LinearThresholdPolicy::multi([th1, 1.0, th3, th4, -0.5, 1.0, th7, th8]));
                    }
                }
            }
        }
    }
    PolicyGrid::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_history(states: &[f64]) -> History<'_> {
        History::new(states, 1, states.len())
    }

    #[test]
    fn persistence_returns_previous_arm() {
        let p = LinearThresholdPolicy::never();
        let s = [0.0, 0.0, 0.0];
        assert_eq!(decide(&p, scalar_history(&s), &[0, 2]).unwrap(), 2);
    }

    #[test]
    fn terminal_state_forces_zero() {
        let p = LinearThresholdPolicy::binary(0.0, -1.0, 1.0).respecting_terminal(-1.0);
        let s = [0.5, -1.0];
        assert_eq!(decide(&p, scalar_history(&s), &[1]).unwrap(), 0);
        assert_eq!(decide(&p, scalar_history(&s[..1]), &[]).unwrap(), 1);
    }

    #[test]
    fn inconsistent_prefix_lengths_error() {
        let p = LinearThresholdPolicy::never();
        assert!(decide(&p, scalar_history(&[0.0, 0.0]), &[]).is_err());
    }

    #[test]
    fn time_only_rule_fires_at_its_time() {
        let p = LinearThresholdPolicy::binary(0.0, -1.0, 3.0);
        let s = [5.0, -2.0, 0.3];
        assert_eq!(decide(&p, scalar_history(&s), &[0, 0]).unwrap(), 1);
        assert_eq!(decide(&p, scalar_history(&s[..2]), &[0]).unwrap(), 0);
        let full = [0.0; 10];
        assert_eq!(stopping_time(&p, History::new(&full, 1, 10)), (3, 1));
    }

    #[test]
    fn never_policy_stopping_time() {
        let full = [0.0; 10];
        assert_eq!(stopping_time(&LinearThresholdPolicy::never(), History::new(&full, 1, 10)), (11, 0));
    }

    #[test]
    fn multi_policy_both_hyperplanes() {
        // start: X' + Y' + 0·t >= 5; invasive when 0.5 X' + Y' + 0·t >= 3.
        let p = LinearThresholdPolicy::multi([1.0, 1.0, 0.0, 5.0, 0.5, 1.0, 0.0, 3.0]);
        let states = [1.0, 1.0, 2.0, 4.0, 0.0, 0.0];
        assert_eq!(stopping_time(&p, History::new(&states, 2, 3)), (2, 2));
        let mild = [1.0, 1.0, 4.5, 0.5, 0.0, 0.0];
        assert_eq!(stopping_time(&p, History::new(&mild, 2, 3)), (2, 1));
    }

    #[test]
    fn policy_vector_indices() {
        assert_eq!(PolicyVector::new(1, 1, 1, 2).to_dense(), vec![1, 0, 0]);
        assert_eq!(PolicyVector::new(3, 0, 1, 2).to_dense(), vec![0, 0, 1]);
        assert_eq!(PolicyVector::new(4, 2, 2, 10).hot_index(), 8);
        assert_eq!(PolicyVector::new(11, 0, 2, 10).hot_index(), 21);
    }

    #[test]
    fn binary_grid_shape() {
        let g = binary_grid();
        assert_eq!(g.len(), 11 + 12 + 105);
        for w in g.policies().windows(2) {
            assert_eq!(w[0].cmp_params(&w[1]), Ordering::Less);
        }
        let count = |c| g.policies().iter().filter(|p| p.class() == c).count();
        assert_eq!(count(PolicyClass::BinaryTime), 11);
        assert_eq!(count(PolicyClass::BinaryState), 12);
        assert_eq!(count(PolicyClass::BinaryMixed), 105);
    }

    #[test]
    fn multi_grid_shape() {
        let g = multi_grid();
        assert_eq!(g.len(), 11 + 11 + 2500 + 400);
        for w in g.policies().windows(2) {
            assert_eq!(w[0].cmp_params(&w[1]), Ordering::Less);
        }
        let target = [0.0, 0.0, 1.0, 4.0, 0.0, 0.0, 1.0, 0.0];
        let p = g.policies().iter().find(|p| p.params() == target).expect("invasive class member");
        assert_eq!(p.class(), PolicyClass::MultiInvasive);
        let states = [0.0; 20];
        assert_eq!(stopping_time(p, History::new(&states, 2, 10)), (4, 2));
        let count = |c| g.policies().iter().filter(|p| p.class() == c).count();
        assert_eq!(count(PolicyClass::MultiNonInvasive), 11);
        assert_eq!(count(PolicyClass::MultiInvasive), 11);
        assert_eq!(count(PolicyClass::MultiMixed), 2500);
        assert_eq!(count(PolicyClass::MultiMixedNegative), 400);
    }

    #[test]
    fn policy_text_round_trip() {
        for p in binary_grid().policies().iter().chain(multi_grid().policies().iter().take(50)) {
            let back: LinearThresholdPolicy = p.to_string().parse().unwrap();
            assert_eq!(&back, p);
        }
        let never: LinearThresholdPolicy = "never".parse().unwrap();
        assert_eq!(never, LinearThresholdPolicy::never());
        assert!("bin-time:1,2".parse::<LinearThresholdPolicy>().is_err());
        assert!("bogus:1".parse::<LinearThresholdPolicy>().is_err());
    }

    #[test]
    fn grid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        let g = binary_grid();
        g.save(&path, &Provenance::default()).unwrap();
        assert_eq!(PolicyGrid::load(&path).unwrap(), g);
    }

    #[test]
    fn hamming_extremes() {
        let trajs: Vec<Trajectory> = (0..4)
            .map(|i| Trajectory::from_flat(vec![i as f64; 3], 1, vec![0; 3], 0.0, None).unwrap())
            .collect();
        let ds = Dataset::new(trajs, 1, None, false).unwrap();
        let a = LinearThresholdPolicy::binary(0.0, -1.0, 1.0);
        let b = LinearThresholdPolicy::never();
        assert_eq!(hamming_distance(&a, &a, &ds), 0.0);
        assert_eq!(hamming_distance(&a, &b, &ds), 1.0);
        // start when S >= 2: differs from start-at-1 on trajectories 0 and 1 only.
        let c = LinearThresholdPolicy::binary(1.0, 0.0, 2.0);
        assert_eq!(hamming_distance(&a, &c, &ds), 0.5);
    }
}
