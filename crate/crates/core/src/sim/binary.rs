//! Binary-action setup: treatment starts on and the decision is when to stop.
//!
//! Latent health `X_t` moves as
//! `X_{t+1} ~ N(X_t + on_t / (1 + e^{0.3 X_t}), σ²/(2T))` while `X_t >= -0.5`
//! and freezes below; the observed state is `S_t = X_t + N(0, ν²)` and the
//! outcome is `β 1{S_{T+1} > 0} - (1/T) Σ on_t`. The behavior keeps treatment
//! on with probability `1 - 1/(1 + e^{-(X_t-1.5)} - e^{-(t-3)})`, clamped to
//! `[0, 1]`. In the framework, stopping is arm 1 and stays in effect.
//!
//! Each step draws, in order: observation noise, the behavior uniform and the
//! transition noise, whatever the action, so rollouts of different policies
//! with the same seed share their randomness.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Trajectory};
use crate::error::{invalid, Result};
use crate::policy::WhenToTreatPolicy;
use crate::rng::stream_rng;

/// Parameters of the binary-action setup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryParams {
    /// Latent noise scale `σ`.
    pub sigma: f64,
    /// Reward for ending above zero.
    pub beta: f64,
    /// Observation noise scale `ν`.
    pub nu: f64,
    pub horizon: usize,
}

impl Default for BinaryParams {
    fn default() -> Self {
        Self { sigma: 1.0, beta: 0.5, nu: 0.0, horizon: 10 }
    }
}

impl BinaryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(invalid(format!("binary setup needs σ >= 0 and ν >= 0, got σ={}, ν={}", self.sigma, self.nu)));
        }
        if self.horizon == 0 || !self.beta.is_finite() {
            return Err(invalid("binary setup needs T >= 1 and a finite β"));
        }
        Ok(())
    }

    /// Behavior probability of keeping treatment on at latent state `x`, time `t`.
    pub fn keep_probability(x: f64, t: usize) -> f64 {
        let denom = 1.0 + (-(x - 1.5)).exp() - (-(t as f64 - 3.0)).exp();
        (1.0 - 1.0 / denom).clamp(0.0, 1.0)
    }
}

pub(crate) enum Driver<'a> {
    Behavior,
    Policy(&'a dyn WhenToTreatPolicy),
}

pub(crate) struct Path {
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    /// `(e_0, e_1)` per step.
    pub probs: Vec<f64>,
    pub outcome: f64,
}

pub(crate) fn run(p: &BinaryParams, seed: u64, index: u64, driver: &Driver<'_>) -> Path {
    let mut rng = stream_rng(seed, index);
    let horizon = p.horizon;
    let step_sd = (p.sigma * p.sigma / (2.0 * horizon as f64)).sqrt();
    let mut x = p.sigma * rng.sample::<f64, _>(StandardNormal);
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut probs = Vec::with_capacity(2 * horizon);
    let mut stopped = false;
    let mut cost = 0.0;
    for t in 1..=horizon {
        let obs = x + p.nu * rng.sample::<f64, _>(StandardNormal);
        let u: f64 = rng.random();
        let eps: f64 = rng.sample(StandardNormal);
        states.push(obs);
        if stopped {
            probs.extend([0.0, 1.0]);
        } else {
            let keep = BinaryParams::keep_probability(x, t);
            probs.extend([keep, 1.0 - keep]);
            stopped = match driver {
                Driver::Behavior => u >= keep,
                Driver::Policy(pi) => pi.start_arm(crate::data::History::new(&states, 1, horizon)) != 0,
            };
        }
        actions.push(usize::from(stopped));
        let on = if stopped { 0.0 } else { 1.0 };
        cost += on;
        if x >= -0.5 {
            x = x + on / (1.0 + (0.3 * x).exp()) + step_sd * eps;
        }
    }
    let last = x + p.nu * rng.sample::<f64, _>(StandardNormal);
    let outcome = p.beta * f64::from(u8::from(last > 0.0)) - cost / horizon as f64;
    Path { states, actions, probs, outcome }
}

/// Simulates `n` behavior trajectories with their true propensities attached.
pub fn simulate_binary(p: &BinaryParams, n: usize, seed: u64) -> Result<Dataset> {
    p.validate()?;
    if n == 0 {
        return Err(invalid("simulation needs n >= 1"));
    }
    use rayon::prelude::*;
    let paths: Vec<Path> = (0..n as u64).into_par_iter().map(|i| run(p, seed, i, &Driver::Behavior)).collect();
    let mut probs = Vec::with_capacity(n * p.horizon * 2);
    let mut trajs = Vec::with_capacity(n);
    for path in paths {
        probs.extend_from_slice(&path.probs);
        trajs.push(Trajectory::from_flat(path.states, 1, path.actions, path.outcome, None)?);
    }
    Dataset::new(trajs, 1, None, true)?.with_true_propensities(probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_probability_is_clamped() {
        assert_eq!(BinaryParams::keep_probability(0.0, 1), 1.0);
        assert_eq!(BinaryParams::keep_probability(10.0, 3), 0.0);
        let mid = BinaryParams::keep_probability(1.0, 10);
        assert!(mid > 0.0 && mid < 1.0);
    }

    #[test]
    fn noiseless_observation_equals_latent_path() {
        let p = BinaryParams::default();
        let a = run(&p, 3, 0, &Driver::Behavior);
        let mut rng = stream_rng(3, 0);
        let x1 = p.sigma * rng.sample::<f64, _>(StandardNormal);
        assert_eq!(a.states[0], x1);
        let ds = simulate_binary(&p, 50, 9).unwrap();
        assert_eq!(ds, simulate_binary(&p, 50, 9).unwrap());
        for tr in ds.trajectories() {
            if let Some(s) = tr.actions().iter().position(|&a| a == 1) {
                assert!(tr.actions()[s..].iter().all(|&a| a == 1));
            }
        }
    }
}
