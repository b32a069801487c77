//! Simulation setups, Monte Carlo rollouts and an enumerable verification MDP.

mod binary;
mod multi;
mod tiny;

pub use binary::{simulate_binary, BinaryParams};
pub use multi::{simulate_multi, survival_probability, MultiParams, DEATH_SENTINEL};
pub use tiny::{TinyDiscreteMDP, ENUMERATION_BUDGET};

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::Result;
use crate::estimators::ValueEstimate;
use crate::policy::WhenToTreatPolicy;

/// One of the two simulation setups with its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Setup {
    Binary(BinaryParams),
    Multi(MultiParams),
}

impl Setup {
    pub fn name(&self) -> &'static str {
        match self {
            Setup::Binary(_) => "binary",
            Setup::Multi(_) => "multi",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Setup::Binary(p) => p.validate(),
            Setup::Multi(p) => p.validate(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Setup::Binary(p) => p.horizon,
            Setup::Multi(p) => p.horizon,
        }
    }

    pub fn terminal_sentinel(&self) -> Option<f64> {
        match self {
            Setup::Binary(_) => None,
            Setup::Multi(_) => Some(DEATH_SENTINEL),
        }
    }

    /// `n` behavior trajectories.
    pub fn simulate(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            Setup::Binary(p) => simulate_binary(p, n, seed),
            Setup::Multi(p) => simulate_multi(p, n, seed),
        }
    }

    /// Outcome of rollout `r` under `π`, or under the behavior when `pi` is `None`.
    fn rollout_outcome(&self, pi: &dyn WhenToTreatPolicy, seed: u64, r: u64) -> f64 {
        match self {
            Setup::Binary(p) => binary::run(p, seed, r, &binary::Driver::Policy(pi)).outcome,
            Setup::Multi(p) => multi::run(p, seed, r, &multi::Driver::Policy(pi)).outcome,
        }
    }

    /// Outcomes of `rollouts` on-policy runs of `π`; run `r` uses stream `r`
    /// of `seed`, so different policies share their random numbers.
    pub fn rollout_outcomes(&self, pi: &dyn WhenToTreatPolicy, rollouts: usize, seed: u64) -> Result<Vec<f64>> {
        self.validate()?;
        Ok((0..rollouts as u64).into_par_iter().map(|r| self.rollout_outcome(pi, seed, r)).collect())
    }
}

/// Mean outcome of `π` over `rollouts` on-policy runs.
pub fn rollout_policy(setup: &Setup, pi: &dyn WhenToTreatPolicy, rollouts: usize, seed: u64) -> Result<ValueEstimate> {
    Ok(ValueEstimate::from_contributions(&setup.rollout_outcomes(pi, rollouts, seed)?))
}

/// `V(π) - V(0)` per policy from paired rollouts sharing their random numbers.
pub fn rollout_deltas<P: WhenToTreatPolicy>(setup: &Setup, policies: &[P], rollouts: usize, seed: u64) -> Result<Vec<ValueEstimate>> {
    let never = crate::policy::LinearThresholdPolicy::never();
    let base = setup.rollout_outcomes(&never, rollouts, seed)?;
    policies
        .iter()
        .map(|pi| {
            let y = setup.rollout_outcomes(pi, rollouts, seed)?;
            let d: Vec<f64> = y.iter().zip(&base).map(|(a, b)| a - b).collect();
            Ok(ValueEstimate::from_contributions(&d))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::LinearThresholdPolicy;

    #[test]
    fn deterministic_setup_has_zero_se() {
        let setup = Setup::Binary(BinaryParams { sigma: 0.0, nu: 0.0, ..Default::default() });
        let pi = LinearThresholdPolicy::binary(0.0, -1.0, 4.0);
        let v = rollout_policy(&setup, &pi, 200, 1).unwrap();
        assert!(v.se < 1e-12);
        // X stays at 0 and grows while treated, so S_{T+1} > 0; three steps on.
        assert!((v.estimate - (0.5 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn never_treat_rollout_matches_closed_form() {
        // With β = 0 the outcome is minus the fraction of steps on treatment.
        let setup = Setup::Binary(BinaryParams { beta: 0.0, ..Default::default() });
        let never = LinearThresholdPolicy::never();
        let v = rollout_policy(&setup, &never, 100, 3).unwrap();
        assert_eq!(v.estimate, -1.0);
        let stop_at_5 = LinearThresholdPolicy::binary(0.0, -1.0, 5.0);
        let v = rollout_policy(&setup, &stop_at_5, 100, 3).unwrap();
        assert!((v.estimate + 0.4).abs() < 1e-12);
    }

    #[test]
    fn rollouts_ignore_thread_count() {
        let setup = Setup::Multi(MultiParams::default());
        let pi = LinearThresholdPolicy::multi([0.0, 0.0, 1.0, 3.0, 0.0, 0.0, 1.0, 0.0]).respecting_terminal(DEATH_SENTINEL);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| setup.rollout_outcomes(&pi, 500, 11).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
