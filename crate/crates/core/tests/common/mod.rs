//! Property checks shared by the property suite and the acceptance run.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use adr_core::data::{assign_folds, Dataset, History};
use adr_core::estimators::{adr_delta, adr_delta_weighted, oracle_scores};
use adr_core::policy::{hamming_distance, stopping_time, LinearThresholdPolicy};
use adr_core::sim::{simulate_binary, simulate_multi, BinaryParams, MultiParams, TinyDiscreteMDP, DEATH_SENTINEL};

pub type CheckResult = Result<(), TestCaseError>;

pub fn binary_policy() -> impl Strategy<Value = LinearThresholdPolicy> {
    (-2.0f64..2.0, -1.0f64..1.0, -3.0f64..3.0).prop_map(|(a, b, c)| LinearThresholdPolicy::binary(a, b, c))
}

pub fn multi_policy() -> impl Strategy<Value = LinearThresholdPolicy> {
    proptest::array::uniform8(-2.0f64..2.0).prop_map(LinearThresholdPolicy::multi)
}

/// Changing states after `t` never changes whether the rule fired by `t`.
pub fn measurability(pi: &LinearThresholdPolicy, states: &[f64], tail: &[f64], t: usize) -> CheckResult {
    let horizon = states.len();
    let t = t.clamp(1, horizon);
    let mut altered = states.to_vec();
    for (s, d) in altered[t..].iter_mut().zip(tail) {
        *s += d;
    }
    let (a_tau, a_arm) = stopping_time(pi, History::new(states, 1, horizon));
    let (b_tau, b_arm) = stopping_time(pi, History::new(&altered, 1, horizon));
    if a_tau <= t || b_tau <= t {
        prop_assert_eq!((a_tau, a_arm), (b_tau, b_arm));
    }
    let prefix = stopping_time(pi, History::new(&states[..t], 1, horizon));
    prop_assert_eq!(prefix.0 <= t, a_tau <= t);
    Ok(())
}

fn persistent(ds: &Dataset) -> CheckResult {
    for tr in ds.trajectories() {
        if let Some((t, k)) = tr.first_treatment() {
            let stop = tr.terminal_entry().unwrap_or(ds.horizon() + 1);
            prop_assert!(tr.actions()[t - 1..stop - 1].iter().all(|&a| a == k));
        }
    }
    Ok(())
}

/// Simulated actions never change after treatment starts.
pub fn persistence(seed: u64, sigma: f64) -> CheckResult {
    persistent(&simulate_binary(&BinaryParams { sigma, ..BinaryParams::default() }, 40, seed).unwrap())?;
    persistent(&simulate_multi(&MultiParams { sigma, horizon: 10 }, 40, seed).unwrap())
}

/// Every index belongs to exactly one fold, folds are balanced and members
/// never appear in their own complement.
pub fn fold_exclusivity(n: usize, q: usize, seed: u64) -> CheckResult {
    let plan = assign_folds(n, q, seed).unwrap();
    let mut seen = vec![0usize; n];
    let mut sizes = Vec::new();
    for f in 0..q {
        let members = plan.members(f);
        let complement = plan.complement(f);
        prop_assert_eq!(members.len() + complement.len(), n);
        for &i in &members {
            seen[i] += 1;
            prop_assert!(!complement.contains(&i));
        }
        sizes.push(members.len());
    }
    prop_assert!(seen.iter().all(|&c| c == 1));
    prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    Ok(())
}

/// Once a trajectory dies it stays dead, untreated and sentinel-valued.
pub fn terminal_absorption(seed: u64, sigma: f64) -> CheckResult {
    let ds = simulate_multi(&MultiParams { sigma, horizon: 10 }, 60, seed).unwrap();
    for tr in ds.trajectories() {
        match tr.terminal_entry() {
            Some(e) => {
                for t in 1..=ds.horizon() {
                    prop_assert_eq!(tr.is_terminal_at(t), t >= e);
                    if t >= e {
                        prop_assert_eq!(tr.action(t), 0);
                        prop_assert!(tr.state(t).iter().all(|&v| v == DEATH_SENTINEL));
                    }
                }
                prop_assert_eq!(tr.outcome(), (e - 1) as f64);
            }
            None => prop_assert!((1..=ds.horizon()).all(|t| !tr.is_terminal_at(t))),
        }
    }
    Ok(())
}

/// `Δ̂(π, π') = -Δ̂(π', π)` and `Δ̂(π, π) = 0` contribution by contribution.
pub fn antisymmetry(seed: u64, i: usize, j: usize) -> CheckResult {
    let mdp = TinyDiscreteMDP::example();
    let ds = mdp.simulate(300, seed).unwrap();
    let sm = oracle_scores(&ds, &mdp.nuisance_table(&ds).unwrap()).unwrap();
    let grid = mdp.policy_grid();
    let (a, b) = (&grid[i % grid.len()], &grid[j % grid.len()]);
    let ab = adr_delta(&sm, &ds, a, b).unwrap();
    let ba = adr_delta(&sm, &ds, b, a).unwrap();
    prop_assert_eq!(ab.estimate, -ba.estimate);
    prop_assert_eq!(ab.se, ba.se);
    prop_assert_eq!(adr_delta(&sm, &ds, a, a).unwrap().estimate, 0.0);
    Ok(())
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

/// Simulation and the normalized estimator agree across worker-pool sizes.
pub fn thread_determinism(seed: u64, threads: usize) -> CheckResult {
    let mdp = TinyDiscreteMDP::example();
    let run = |k: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap();
        pool.install(|| {
            let ds = mdp.simulate(500, seed).unwrap();
            let table = mdp.nuisance_table(&ds).unwrap();
            let pi = &mdp.policy_grid()[5];
            let w = adr_delta_weighted(&ds, &table, pi).unwrap();
            let b = simulate_binary(&BinaryParams::default(), 50, seed).unwrap();
            (ds, w, b)
        })
    };
    let (ds1, w1, b1) = run(1);
    let (dsk, wk, bk) = run(threads);
    prop_assert_eq!(ds1, dsk);
    prop_assert_eq!(b1, bk);
    prop_assert!(close(w1.estimate, wk.estimate, 1e-12));
    prop_assert!(close(w1.se, wk.se, 1e-12));
    Ok(())
}

/// Hamming distance is symmetric, zero on the diagonal and obeys the triangle inequality.
pub fn hamming_pseudometric(seed: u64, a: &LinearThresholdPolicy, b: &LinearThresholdPolicy, c: &LinearThresholdPolicy) -> CheckResult {
    let ds = simulate_binary(&BinaryParams::default(), 80, seed).unwrap();
    let (ab, ba) = (hamming_distance(a, b, &ds), hamming_distance(b, a, &ds));
    prop_assert_eq!(ab, ba);
    prop_assert_eq!(hamming_distance(a, a, &ds), 0.0);
    prop_assert!(ab <= hamming_distance(a, c, &ds) + hamming_distance(c, b, &ds) + 1e-15);
    prop_assert!((0.0..=1.0).contains(&ab));
    Ok(())
}

/// Runs every property with `cases` generated inputs; returns failures by name.
pub fn run_all(cases: u32) -> Vec<(&'static str, String)> {
    let mut failures = Vec::new();
    let runner = || TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    let mut record = |name: &'static str, r: Result<(), String>| {
        if let Err(e) = r {
            failures.push((name, e));
        }
    };
    let states = proptest::collection::vec(-3.0f64..3.0, 10);
    let tail = proptest::collection::vec(-5.0f64..5.0, 10);
    record(
        "measurability",
        runner()
            .run(&(binary_policy(), states, tail, 1usize..=10), |(pi, s, d, t)| measurability(&pi, &s, &d, t))
            .map_err(|e| e.to_string()),
    );
    record(
        "persistence",
        runner().run(&(any::<u64>(), 0.0f64..2.0), |(seed, s)| persistence(seed, s)).map_err(|e| e.to_string()),
    );
    record(
        "fold exclusivity",
        runner()
            .run(&(2usize..200, 2usize..10, any::<u64>()), |(n, q, seed)| fold_exclusivity(n.max(q), q, seed))
            .map_err(|e| e.to_string()),
    );
    record(
        "terminal absorption",
        runner().run(&(any::<u64>(), 0.0f64..2.0), |(seed, s)| terminal_absorption(seed, s)).map_err(|e| e.to_string()),
    );
    record(
        "antisymmetry",
        runner()
            .run(&(any::<u64>(), 0usize..64, 0usize..64), |(seed, i, j)| antisymmetry(seed, i, j))
            .map_err(|e| e.to_string()),
    );
    record(
        "thread determinism",
        runner().run(&(any::<u64>(), 2usize..6), |(seed, k)| thread_determinism(seed, k)).map_err(|e| e.to_string()),
    );
    record(
        "hamming pseudometric",
        runner()
            .run(&(any::<u64>(), binary_policy(), binary_policy(), binary_policy()), |(seed, a, b, c)| {
                hamming_pseudometric(seed, &a, &b, &c)
            })
            .map_err(|e| e.to_string()),
    );
    failures
}
