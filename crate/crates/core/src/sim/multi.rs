//! Multi-arm setup with death as an absorbing terminal state.
//!
//! Latent general health `X_t`, tumor size `Y_t` and a static category `Z`:
//! `X_1 ~ Exp(1)`, `Y_1 ~ 0.5 Exp(3)`, `Z ∈ {1, 2, 3}` with probabilities
//! `(0.3, 0.3, 0.4)`. Category 1 dies after the first step, category 2 never
//! dies and category 3 survives each step with probability `e^{-0.02 Y}` for
//! `Y <= 5`, `e^{-0.06 Y}` for `5 < Y <= 14` and 0 above. Arm 1 shrinks the
//! tumor, arm 2 removes it but hurts `X`. The observed state is
//! `(clamp(X + ν, 0, 10), clamp(Y + ν, 0, 16))` with one shared `ν ~ N(0, σ²)`.
//! The outcome is the survival time `R`.
//!
//! The behavior starts treatment at time `t` with probability `1/(T-t+2)`,
//! split evenly between the arms. Each step draws, in order: `ν`, the behavior
//! uniform, the survival uniform and the transition noise.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::data::{Dataset, History, TerminalSpec, Trajectory};
use crate::error::{invalid, Result};
use crate::policy::WhenToTreatPolicy;
use crate::rng::stream_rng;

/// Encoding of the dead state in every coordinate.
pub const DEATH_SENTINEL: f64 = -1.0;
const X_MAX: f64 = 10.0;
const Y_MAX: f64 = 16.0;
const STEP_SD: f64 = 0.5;
const X_CAP: f64 = 1e150;

/// Parameters of the multi-arm setup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiParams {
    /// Observation noise scale `σ`.
    pub sigma: f64,
    pub horizon: usize,
}

impl Default for MultiParams {
    fn default() -> Self {
        Self { sigma: 1.0, horizon: 10 }
    }
}

impl MultiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("multi setup needs σ >= 0, got {}", self.sigma)));
        }
        if self.horizon == 0 {
            return Err(invalid("multi setup needs T >= 1"));
        }
        Ok(())
    }

    pub fn terminal_spec() -> TerminalSpec {
        TerminalSpec::survival(DEATH_SENTINEL)
    }

    /// Behavior probability of starting either arm at time `t`.
    pub fn start_probability(&self, t: usize) -> f64 {
        1.0 / (self.horizon as f64 - t as f64 + 2.0)
    }
}

/// Per-step survival probability of category 3 at tumor size `y`.
pub fn survival_probability(y: f64) -> f64 {
    if y <= 5.0 {
        (-0.02 * y).exp()
    } else if y <= 14.0 {
        (-0.06 * y).exp()
    } else {
        0.0
    }
}

pub(crate) enum Driver<'a> {
    Behavior,
    Policy(&'a dyn WhenToTreatPolicy),
}

pub(crate) struct Path {
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    /// `(e_0, e_1, e_2)` per step.
    pub probs: Vec<f64>,
    pub terminal_entry: Option<usize>,
    pub outcome: f64,
}

pub(crate) fn run(p: &MultiParams, seed: u64, index: u64, driver: &Driver<'_>) -> Path {
    let mut rng = stream_rng(seed, index);
    let horizon = p.horizon;
    let mut x: f64 = Exp::new(1.0).expect("rate 1").sample(&mut rng);
    let mut y: f64 = 0.5 * Exp::new(3.0).expect("rate 3").sample(&mut rng);
    let zu: f64 = rng.random();
    let z = if zu < 0.3 {
        1
    } else if zu < 0.6 {
        2
    } else {
        3
    };
    let mut states = Vec::with_capacity(2 * horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut probs = Vec::with_capacity(3 * horizon);
    let mut alive = true;
    let mut arm = 0usize;
    let mut terminal_entry = None;
    let mut outcome = horizon as f64;
    for t in 1..=horizon {
        let nu = p.sigma * rng.sample::<f64, _>(StandardNormal);
        let u: f64 = rng.random();
        let us: f64 = rng.random();
        let eps = STEP_SD * rng.sample::<f64, _>(StandardNormal);
        if !alive {
            states.extend([DEATH_SENTINEL, DEATH_SENTINEL]);
            actions.push(0);
            probs.extend([1.0, 0.0, 0.0]);
            continue;
        }
        states.extend([(x + nu).clamp(0.0, X_MAX), (y + nu).clamp(0.0, Y_MAX)]);
        if arm != 0 {
            let mut row = [0.0; 3];
            row[arm] = 1.0;
            probs.extend(row);
        } else {
            let s = p.start_probability(t);
            probs.extend([1.0 - s, s / 2.0, s / 2.0]);
            arm = match driver {
                Driver::Behavior if u < s / 2.0 => 1,
                Driver::Behavior if u < s => 2,
                Driver::Behavior => 0,
                Driver::Policy(pi) => pi.start_arm(History::new(&states, 2, horizon)),
            };
        }
        actions.push(arm);
        let alive_next = match z {
            1 => false,
            2 => true,
            _ => us < survival_probability(y),
        };
        if !alive_next {
            outcome = t as f64;
            if t < horizon {
                terminal_entry = Some(t + 1);
            }
        }
        alive = alive_next;
        let (nx, ny) = match arm {
            0 => ((x + eps).abs(), (y + 0.5 * x + eps).abs()),
            1 => ((x + eps).abs(), (0.5 * y + eps).abs()),
            _ => (x + ((x * x).max(1.5 * x) + eps - x).abs(), 0.0),
        };
        x = nx.min(X_CAP);
        y = ny;
    }
    Path { states, actions, probs, terminal_entry, outcome }
}

/// Simulates `n` behavior trajectories with the terminal spec and true propensities.
pub fn simulate_multi(p: &MultiParams, n: usize, seed: u64) -> Result<Dataset> {
    p.validate()?;
    if n == 0 {
        return Err(invalid("simulation needs n >= 1"));
    }
    use rayon::prelude::*;
    let paths: Vec<Path> = (0..n as u64).into_par_iter().map(|i| run(p, seed, i, &Driver::Behavior)).collect();
    let mut probs = Vec::with_capacity(n * p.horizon * 3);
    let mut trajs = Vec::with_capacity(n);
    for path in paths {
        probs.extend_from_slice(&path.probs);
        trajs.push(Trajectory::from_flat(path.states, 2, path.actions, path.outcome, path.terminal_entry)?);
    }
    Dataset::new(trajs, 2, Some(MultiParams::terminal_spec()), true)?.with_true_propensities(probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survival_curve_pieces() {
        assert_eq!(survival_probability(0.0), 1.0);
        assert!((survival_probability(5.0) - (-0.1f64).exp()).abs() < 1e-15);
        assert!((survival_probability(10.0) - (-0.6f64).exp()).abs() < 1e-15);
        assert_eq!(survival_probability(14.5), 0.0);
    }

    #[test]
    fn terminated_outcomes_equal_survival_time() {
        let p = MultiParams::default();
        let ds = simulate_multi(&p, 400, 5).unwrap();
        let mut died = 0;
        for tr in ds.trajectories() {
            match tr.terminal_entry() {
                Some(e) => {
                    died += 1;
                    assert_eq!(tr.outcome(), (e - 1) as f64);
                    assert!(tr.actions()[e - 1..].iter().all(|&a| a == 0));
                }
                None => assert!(tr.outcome() >= (p.horizon - 1) as f64 && tr.outcome() <= p.horizon as f64),
            }
            if let Some((t, k)) = tr.first_treatment() {
                let stop = tr.terminal_entry().map_or(p.horizon + 1, |e| e);
                assert!(tr.actions()[t - 1..stop - 1].iter().all(|&a| a == k));
            }
        }
        // Category 1 alone is 30% of the population.
        assert!(died > 100);
    }

    #[test]
    fn true_propensities_follow_schedule() {
        let p = MultiParams::default();
        let ds = simulate_multi(&p, 20, 1).unwrap();
        let tr = ds.trajectory(0);
        if !tr.is_terminal_at(1) {
            let s = p.start_probability(1);
            assert_eq!(ds.true_propensity(0, 1, 1), Some(s / 2.0));
            assert_eq!(s, 1.0 / 11.0);
        }
    }
}
