//! A small finite MDP whose values can be computed by exhaustive enumeration.
//!
//! States are the integers `0..S` stored as one-dimensional `f64` states. The
//! outcome is `Y = Σ_t r(S_t) + b(τ, W)`, where `b` is an additive effect of
//! the start time and arm (`b = 0` when treatment never starts). The behavior
//! starts arm `a` at a never-treated state with probability `e_{t,a}(s)` and
//! keeps the arm once started.

use std::collections::HashMap;

use rand::Rng;

use crate::data::{Dataset, History, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::nuisance::NuisanceTable;
use crate::policy::{decide, stopping_time, LinearThresholdPolicy, WhenToTreatPolicy};
use crate::rng::stream_rng;

/// Largest number of state-action paths an enumeration may visit.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

/// Finite MDP with explicit tables; every row is a probability distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyDiscreteMDP {
    horizon: usize,
    num_arms: usize,
    initial: Vec<f64>,
    /// `[t-1][s][a][s']` for `t = 1..T-1`.
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[t-1][s][a]` for never-treated histories, `t = 1..T`.
    behavior: Vec<Vec<Vec<f64>>>,
    reward: Vec<f64>,
    /// `[τ-1][k-1]`.
    start_effect: Vec<Vec<f64>>,
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|v| (0.0..=1.0).contains(v)) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl TinyDiscreteMDP {
    pub fn new(
        num_arms: usize,
        initial: Vec<f64>,
        transitions: Vec<Vec<Vec<Vec<f64>>>>,
        behavior: Vec<Vec<Vec<f64>>>,
        reward: Vec<f64>,
        start_effect: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let ns = initial.len();
        let horizon = behavior.len();
        if ns == 0 || horizon == 0 || num_arms == 0 {
            return Err(invalid("tiny MDP needs at least one state, time step and arm"));
        }
        if !is_distribution(&initial) {
            return Err(invalid("initial distribution does not sum to 1"));
        }
        if transitions.len() + 1 != horizon || reward.len() != ns || start_effect.len() != horizon {
            return Err(invalid("tiny MDP tables disagree on T or S"));
        }
        for (t, table) in transitions.iter().enumerate() {
            let ok = table.len() == ns
                && table.iter().all(|by_a| {
                    by_a.len() == num_arms + 1 && by_a.iter().all(|row| row.len() == ns && is_distribution(row))
                });
            if !ok {
                return Err(invalid(format!("transition table at t={} is not a set of distributions", t + 1)));
            }
        }
        for (t, table) in behavior.iter().enumerate() {
            let ok = table.len() == ns && table.iter().all(|row| row.len() == num_arms + 1 && is_distribution(row));
            if !ok {
                return Err(invalid(format!("behavior table at t={} is not a set of distributions", t + 1)));
            }
        }
        if start_effect.iter().any(|r| r.len() != num_arms) {
            return Err(invalid("start effect needs one entry per arm"));
        }
        Ok(Self { horizon, num_arms, initial, transitions, behavior, reward, start_effect })
    }

    /// Three states, two arms, `T = 4`, full overlap.
    pub fn example() -> Self {
        let horizon = 4;
        let by_action = vec![
            vec![vec![0.7, 0.2, 0.1], vec![0.8, 0.15, 0.05], vec![0.6, 0.3, 0.1]],
            vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.45, 0.15], vec![0.6, 0.3, 0.1]],
            vec![vec![0.1, 0.3, 0.6], vec![0.2, 0.4, 0.4], vec![0.5, 0.3, 0.2]],
        ];
        let behavior = vec![vec![0.6, 0.2, 0.2], vec![0.5, 0.25, 0.25], vec![0.4, 0.3, 0.3]];
        let effect = (1..=horizon).map(|t| vec![-0.05 * t as f64, 0.2 - 0.15 * t as f64]).collect();
        Self::new(
            2,
            vec![0.5, 0.3, 0.2],
            vec![by_action; horizon - 1],
            vec![behavior; horizon],
            vec![1.0, 0.4, -0.5],
            effect,
        )
        .expect("example tables are valid")
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    /// Behavior start probabilities at a never-treated state.
    pub fn behavior(&self, t: usize, s: usize) -> &[f64] {
        &self.behavior[t - 1][s]
    }

    fn check_budget(&self) -> Result<()> {
        let per_step = (self.num_states() * (self.num_arms + 1)) as u128;
        let needed = per_step.checked_pow(self.horizon as u32).unwrap_or(u128::MAX);
        if needed > ENUMERATION_BUDGET {
            return Err(Error::EnumerationBudget { needed, budget: ENUMERATION_BUDGET });
        }
        Ok(())
    }

    fn state_index(&self, v: f64) -> Result<usize> {
        let s = v as usize;
        if v < 0.0 || v.fract() != 0.0 || s >= self.num_states() {
            return Err(Error::Data(format!("state {v} is not a state of the tiny MDP")));
        }
        Ok(s)
    }

    /// `Y` for a complete path.
    pub fn outcome(&self, states: &[usize], actions: &[usize]) -> f64 {
        let base: f64 = states.iter().map(|&s| self.reward[s]).sum();
        match actions.iter().position(|&a| a != 0) {
            Some(p) => base + self.start_effect[p][actions[p] - 1],
            None => base,
        }
    }

    /// Expected reward collected after time `t` when arm `k` (0 = none) is applied from `t` on.
    fn future(&self, t: usize, s: usize, k: usize) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        self.transitions[t - 1][s][k]
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s2, p)| p * (self.reward[s2] + self.future(t + 1, s2, k)))
            .sum()
    }

    /// `μ_now,k` on a never-treated prefix of state indices.
    pub fn mu_now(&self, prefix: &[usize], k: usize) -> f64 {
        let t = prefix.len();
        let past: f64 = prefix.iter().map(|&s| self.reward[s]).sum();
        past + self.future(t, prefix[t - 1], k) + self.start_effect[t - 1][k - 1]
    }

    /// `μ_next,k` on a never-treated prefix of state indices.
    pub fn mu_next(&self, prefix: &[usize], k: usize) -> f64 {
        let t = prefix.len();
        let past: f64 = prefix.iter().map(|&s| self.reward[s]).sum();
        if t == self.horizon {
            return past;
        }
        let cont: f64 = self.transitions[t - 1][prefix[t - 1]][0]
            .iter()
            .enumerate()
            .map(|(s2, p)| p * (self.reward[s2] + self.future(t + 1, s2, k)))
            .sum();
        past + cont + self.start_effect[t][k - 1]
    }

    pub fn delta_local(&self, prefix: &[usize], k: usize) -> f64 {
        self.mu_now(prefix, k) - self.mu_next(prefix, k)
    }

    /// Depth-first walk over all paths; `choose` gives the action distribution
    /// at `t = states.len()` given `A_{1:t-1}`.
    fn enumerate<C, V>(&self, choose: &C, visit: &mut V) -> Result<()>
    where
        C: Fn(&[f64], &[usize]) -> Result<Vec<(usize, f64)>>,
        V: FnMut(f64, &[f64], &[usize]) -> Result<()>,
    {
        self.check_budget()?;
        let mut states = Vec::with_capacity(self.horizon);
        let mut actions = Vec::with_capacity(self.horizon);
        for (s, &p) in self.initial.iter().enumerate() {
            if p > 0.0 {
                states.push(s as f64);
                self.walk(p, &mut states, &mut actions, choose, visit)?;
                states.pop();
            }
        }
        Ok(())
    }

    fn walk<C, V>(&self, prob: f64, states: &mut Vec<f64>, actions: &mut Vec<usize>, choose: &C, visit: &mut V) -> Result<()>
    where
        C: Fn(&[f64], &[usize]) -> Result<Vec<(usize, f64)>>,
        V: FnMut(f64, &[f64], &[usize]) -> Result<()>,
    {
        let t = states.len();
        for (a, pa) in choose(states, actions)? {
            if pa == 0.0 {
                continue;
            }
            actions.push(a);
            if t == self.horizon {
                visit(prob * pa, states, actions)?;
            } else {
                let s = states[t - 1] as usize;
                for (s2, &q) in self.transitions[t - 1][s][a].iter().enumerate() {
                    if q > 0.0 {
                        states.push(s2 as f64);
                        self.walk(prob * pa * q, states, actions, choose, visit)?;
                        states.pop();
                    }
                }
            }
            actions.pop();
        }
        Ok(())
    }

    fn behavior_choice(&self, states: &[f64], actions: &[usize]) -> Vec<(usize, f64)> {
        match actions.last() {
            Some(&a) if a != 0 => vec![(a, 1.0)],
            _ => {
                let t = states.len();
                self.behavior(t, states[t - 1] as usize).iter().copied().enumerate().collect()
            }
        }
    }

    fn indices(states: &[f64]) -> Vec<usize> {
        states.iter().map(|&v| v as usize).collect()
    }

    /// `V_π` by enumerating every path under `π`.
    pub fn value<P: WhenToTreatPolicy + ?Sized>(&self, pi: &P) -> Result<f64> {
        let horizon = self.horizon;
        let choose = |s: &[f64], a: &[usize]| -> Result<Vec<(usize, f64)>> {
            Ok(vec![(decide(pi, History::new(s, 1, horizon), a)?, 1.0)])
        };
        let mut total = 0.0;
        self.enumerate(&choose, &mut |p, s, a| {
            total += p * self.outcome(&Self::indices(s), a);
            Ok(())
        })?;
        Ok(total)
    }

    /// `Δ(π, 0)` as the difference of the two enumerated values.
    pub fn delta_by_values<P: WhenToTreatPolicy + ?Sized>(&self, pi: &P) -> Result<f64> {
        Ok(self.value(pi)? - self.value(&LinearThresholdPolicy::never())?)
    }

    /// `Δ(π, 0)` as the expected sum of local advantages from `τ_π` on,
    /// over never-treated paths.
    pub fn delta_never_measure<P: WhenToTreatPolicy + ?Sized>(&self, pi: &P) -> Result<f64> {
        let choose = |_: &[f64], _: &[usize]| -> Result<Vec<(usize, f64)>> { Ok(vec![(0, 1.0)]) };
        let mut total = 0.0;
        self.enumerate(&choose, &mut |p, s, _| {
            let (tau, arm) = stopping_time(pi, History::new(s, 1, self.horizon));
            let idx = Self::indices(s);
            let adv: f64 = (tau..=self.horizon).map(|t| self.delta_local(&idx[..t], arm)).sum();
            total += p * adv;
            Ok(())
        })?;
        Ok(total)
    }

    /// `Δ(π, 0)` as the inverse-propensity-weighted sum of local advantages
    /// over behavior paths.
    pub fn delta_sampling_measure<P: WhenToTreatPolicy + ?Sized>(&self, pi: &P) -> Result<f64> {
        let choose = |s: &[f64], a: &[usize]| -> Result<Vec<(usize, f64)>> { Ok(self.behavior_choice(s, a)) };
        let mut total = 0.0;
        self.enumerate(&choose, &mut |p, s, a| {
            let (tau, arm) = stopping_time(pi, History::new(s, 1, self.horizon));
            let idx = Self::indices(s);
            let mut w = 1.0;
            for t in 1..=self.horizon {
                if t >= tau {
                    total += p * w * self.delta_local(&idx[..t], arm);
                }
                if a[t - 1] != 0 {
                    break;
                }
                w /= self.behavior(t, idx[t - 1])[0];
            }
            Ok(())
        })?;
        Ok(total)
    }

    /// `n` behavior trajectories with their true propensities.
    pub fn simulate(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(invalid("simulation needs n >= 1"));
        }
        let width = self.num_arms + 1;
        let mut trajs = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n * self.horizon * width);
        for i in 0..n {
            let mut rng = stream_rng(seed, i as u64);
            let mut s = draw(&self.initial, rng.random());
            let mut states = Vec::with_capacity(self.horizon);
            let mut actions = Vec::with_capacity(self.horizon);
            let mut arm = 0;
            for t in 1..=self.horizon {
                states.push(s);
                if arm == 0 {
                    let row = self.behavior(t, s);
                    probs.extend_from_slice(row);
                    arm = draw(row, rng.random());
                } else {
                    probs.extend((0..width).map(|a| f64::from(u8::from(a == arm))));
                }
                actions.push(arm);
                if t < self.horizon {
                    s = draw(&self.transitions[t - 1][s][arm], rng.random());
                }
            }
            let y = self.outcome(&states, &actions);
            let flat = states.iter().map(|&s| s as f64).collect();
            trajs.push(Trajectory::from_flat(flat, 1, actions, y, None)?);
        }
        Dataset::new(trajs, self.num_arms, None, true)?.with_true_propensities(probs)
    }

    /// Exact propensities and `μ_now`/`μ_next` on every prefix of a dataset.
    pub fn nuisance_table(&self, ds: &Dataset) -> Result<NuisanceTable> {
        self.check_shape(ds)?;
        let mut table = NuisanceTable::new(ds.n(), self.horizon, self.num_arms, false);
        for (i, tr) in ds.trajectories().iter().enumerate() {
            let idx = tr.states_flat().iter().map(|&v| self.state_index(v)).collect::<Result<Vec<_>>>()?;
            for t in 1..=self.horizon {
                table.set_e(i, t, self.behavior(t, idx[t - 1]));
                for k in 1..=self.num_arms {
                    table.set_mu_now(i, t, k, self.mu_now(&idx[..t], k));
                    table.set_mu_next(i, t, k, self.mu_next(&idx[..t], k));
                }
            }
        }
        Ok(table)
    }

    /// `μ_π,t(S_{1:t}, A_{1:t-1})`: the expected outcome of following `π` from
    /// `t` on, row-major `n × T`.
    pub fn mu_pi_table<P: WhenToTreatPolicy + ?Sized>(&self, ds: &Dataset, pi: &P) -> Result<Vec<f64>> {
        self.check_shape(ds)?;
        let mut memo: HashMap<(Vec<u64>, Vec<usize>), f64> = HashMap::new();
        let mut out = Vec::with_capacity(ds.n() * self.horizon);
        for tr in ds.trajectories() {
            for s in tr.states_flat() {
                self.state_index(*s)?;
            }
            for t in 1..=self.horizon {
                let states = &tr.states_flat()[..t];
                let actions = &tr.actions()[..t - 1];
                let key = (states.iter().map(|v| v.to_bits()).collect(), actions.to_vec());
                let v = match memo.get(&key) {
                    Some(&v) => v,
                    None => {
                        let mut s = states.to_vec();
                        let mut a = actions.to_vec();
                        let v = self.follow(pi, &mut s, &mut a)?;
                        memo.insert(key, v);
                        v
                    }
                };
                out.push(v);
            }
        }
        Ok(out)
    }

    fn follow<P: WhenToTreatPolicy + ?Sized>(&self, pi: &P, states: &mut Vec<f64>, actions: &mut Vec<usize>) -> Result<f64> {
        let t = states.len();
        let a = decide(pi, History::new(states, 1, self.horizon), actions)?;
        actions.push(a);
        let v = if t == self.horizon {
            self.outcome(&Self::indices(states), actions)
        } else {
            let s = states[t - 1] as usize;
            let mut acc = 0.0;
            for (s2, &q) in self.transitions[t - 1][s][a].iter().enumerate() {
                if q > 0.0 {
                    states.push(s2 as f64);
                    acc += q * self.follow(pi, states, actions)?;
                    states.pop();
                }
            }
            acc
        };
        actions.pop();
        Ok(v)
    }

    fn check_shape(&self, ds: &Dataset) -> Result<()> {
        if ds.horizon() != self.horizon || ds.num_arms() != self.num_arms || ds.state_dim() != 1 {
            return Err(invalid("dataset does not match the tiny MDP's T, K or state dimension"));
        }
        Ok(())
    }

    /// Small grid of policies: start when `s >= c` or `t >= c`, with a fixed
    /// arm or an arm chosen by the state.
    pub fn policy_grid(&self) -> Vec<LinearThresholdPolicy> {
        let mut out = vec![LinearThresholdPolicy::never()];
        let arms: [(f64, f64, f64); 3] = [(0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (1.0, 0.0, 1.0)];
        for (th5, th7, th8) in arms {
            for c in 1..=self.horizon {
                out.push(LinearThresholdPolicy::multi([0.0, 0.0, 1.0, c as f64, th5, 0.0, th7, th8]));
            }
            for c in 1..self.num_states() {
                out.push(LinearThresholdPolicy::multi([1.0, 0.0, 0.0, c as f64, th5, 0.0, th7, th8]));
            }
            out.push(LinearThresholdPolicy::multi([1.0, 0.0, 1.0, 3.0, th5, 0.0, th7, th8]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_mdp(effect: f64) -> TinyDiscreteMDP {
        let row = vec![vec![0.5, 0.5]; 2];
        let mut start = vec![vec![0.0]; 3];
        start[0][0] = effect;
        TinyDiscreteMDP::new(
            1,
            vec![0.4, 0.6],
            vec![vec![row.clone(), row]; 2],
            vec![vec![vec![0.5, 0.5]; 2]; 3],
            vec![0.0, 1.0],
            start,
        )
        .unwrap()
    }

    #[test]
    fn additive_start_effect_is_recovered() {
        let mdp = flat_mdp(0.3);
        let always = LinearThresholdPolicy::binary(0.0, -1.0, 1.0);
        assert!((mdp.delta_by_values(&always).unwrap() - 0.3).abs() < 1e-12);
        assert!((mdp.delta_never_measure(&always).unwrap() - 0.3).abs() < 1e-12);
        assert!((mdp.delta_sampling_measure(&always).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(mdp.delta_by_values(&LinearThresholdPolicy::never()).unwrap(), 0.0);
    }

    #[test]
    fn never_has_zero_advantage() {
        let mdp = TinyDiscreteMDP::example();
        let never = LinearThresholdPolicy::never();
        assert_eq!(mdp.delta_never_measure(&never).unwrap(), 0.0);
        assert_eq!(mdp.delta_sampling_measure(&never).unwrap(), 0.0);
    }

    #[test]
    fn three_routes_agree_on_example_grid() {
        let mdp = TinyDiscreteMDP::example();
        let grid = mdp.policy_grid();
        assert!(grid.len() >= 20);
        for pi in &grid {
            let v = mdp.delta_by_values(pi).unwrap();
            let a = mdp.delta_never_measure(pi).unwrap();
            let b = mdp.delta_sampling_measure(pi).unwrap();
            assert!((v - a).abs() < 1e-12, "{pi}: {v} vs {a}");
            assert!((a - b).abs() < 1e-12, "{pi}: {a} vs {b}");
        }
    }

    #[test]
    fn budget_is_enforced() {
        let row = vec![vec![1.0; 1]; 2];
        let mdp = TinyDiscreteMDP::new(
            1,
            vec![1.0],
            vec![vec![row]; 19],
            vec![vec![vec![0.5, 0.5]]; 20],
            vec![0.0],
            vec![vec![0.0]; 20],
        )
        .unwrap();
        assert!(matches!(mdp.value(&LinearThresholdPolicy::never()), Err(Error::EnumerationBudget { .. })));
    }

    #[test]
    fn simulated_data_matches_tables() {
        let mdp = TinyDiscreteMDP::example();
        let ds = mdp.simulate(200, 4).unwrap();
        let table = mdp.nuisance_table(&ds).unwrap();
        assert_eq!(table.e(0, 1, 0).unwrap(), mdp.behavior(1, ds.trajectory(0).state(1)[0] as usize)[0]);
        let never = LinearThresholdPolicy::never();
        let mu = mdp.mu_pi_table(&ds, &never).unwrap();
        let mut by_state = [f64::NAN; 3];
        for i in 0..ds.n() {
            by_state[ds.trajectory(i).state(1)[0] as usize] = mu[i * mdp.horizon()];
        }
        let v0: f64 = [0.5, 0.3, 0.2].iter().zip(by_state).map(|(p, v)| p * v).sum();
        assert!((v0 - mdp.value(&never).unwrap()).abs() < 1e-12);
    }
}
