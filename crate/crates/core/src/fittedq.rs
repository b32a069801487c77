//! Fitted-Q iteration baselines.
//!
//! One regression per `(t, a)` maps history features at `t` to the value of
//! taking `a` at `t`. Models are fitted backward from the anchor `Q_{T+1} = Y`.
//! Feasibility follows the when-to-treat structure: after a start only the
//! same arm continues, and a trajectory entering the terminal state at `t+1`
//! keeps its realized outcome.

use rayon::prelude::*;

use crate::data::{Dataset, FeatureSpec, History};
use crate::error::{invalid, Error, Result};
use crate::estimators::ValueEstimate;
use crate::policy::{observed_stopping_time, WhenToTreatPolicy};
use crate::regress::{FittedModel, RegressorSpec};
use crate::rng::derive_seed;

const C_Q: u64 = 5;

/// Backup used for never-treated rows.
#[derive(Clone, Debug, PartialEq)]
pub enum QMode {
    /// Maximum over feasible next actions.
    Opt,
    /// The evaluated policy's next action; holds its label.
    Eval(String),
}

/// Backward sequence of per-action Q regressions.
#[derive(Clone, Debug)]
pub struct QModelSeq {
    mode: QMode,
    features: FeatureSpec,
    horizon: usize,
    num_arms: usize,
    terminal_sentinel: Option<f64>,
    /// `[t-1][a]`; `None` where no row took `a` at `t`.
    models: Vec<Vec<Option<FittedModel>>>,
}

impl QModelSeq {
    pub fn mode(&self) -> &QMode {
        &self.mode
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    pub fn features(&self) -> &FeatureSpec {
        &self.features
    }

    pub fn has_model(&self, t: usize, a: usize) -> bool {
        self.models[t - 1][a].is_some()
    }

    /// `Q_t(S_{1:t}, a)` with `t = h.len()`, or `None` without a model.
    pub fn q(&self, h: History<'_>, a: usize) -> Option<f64> {
        let model = self.models[h.len() - 1][a].as_ref()?;
        Some(model.predict_scalar(&self.features.extract(h)))
    }

    /// Best fitted action at `h` with ties going to the lower action index.
    pub fn best_action(&self, h: History<'_>) -> Option<(usize, f64)> {
        let x = self.features.extract(h);
        let mut best: Option<(usize, f64)> = None;
        for (a, m) in self.models[h.len() - 1].iter().enumerate() {
            if let Some(m) = m {
                let v = m.predict_scalar(&x);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((a, v));
                }
            }
        }
        best
    }
}

fn argmax(values: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (a, &v) in values.iter().enumerate() {
        if !v.is_nan() && best.is_none_or(|(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    best
}

fn sweep<P: WhenToTreatPolicy + ?Sized>(
    ds: &Dataset,
    policy: Option<&P>,
    spec: &RegressorSpec,
    features: &FeatureSpec,
    seed: u64,
) -> Result<QModelSeq> {
    let (n, horizon, kn) = (ds.n(), ds.horizon(), ds.num_arms());
    let cols = features.len(ds.state_dim(), horizon);
    let starts: Vec<(usize, usize)> = match policy {
        Some(p) => ds.trajectories().iter().map(|tr| observed_stopping_time(p, tr)).collect(),
        None => Vec::new(),
    };
    let mut models: Vec<Vec<Option<FittedModel>>> = vec![vec![None; kn + 1]; horizon];
    // Predictions of Q_{t+1}(S_{1:t+1}, a) per row, NaN where unavailable.
    let mut next: Vec<f64> = Vec::new();
    for t in (1..=horizon).rev() {
        let targets = (0..n)
            .into_par_iter()
            .map(|i| -> Result<Option<f64>> {
                let tr = ds.trajectory(i);
                if tr.is_terminal_at(t) {
                    return Ok(None);
                }
                if t == horizon || tr.is_terminal_at(t + 1) {
                    return Ok(Some(tr.outcome()));
                }
                let a = tr.action(t);
                let row = &next[i * (kn + 1)..(i + 1) * (kn + 1)];
                let next_action = if a != 0 {
                    a
                } else if policy.is_some() {
                    let (tau, arm) = starts[i];
                    if t + 1 >= tau { arm } else { 0 }
                } else {
                    return argmax(row)
                        .map(|(_, v)| Some(v))
                        .ok_or(Error::Unavailable { component: "q", t: t + 1, arm: 0, fold: 0 });
                };
                let v = row[next_action];
                if v.is_nan() {
                    return Err(Error::Unavailable { component: "q", t: t + 1, arm: next_action, fold: 0 });
                }
                Ok(Some(v))
            })
            .collect::<Result<Vec<_>>>()?;
        let fitted = (0..=kn)
            .into_par_iter()
            .map(|a| -> Result<Option<FittedModel>> {
                let mut x = Vec::new();
                let mut y = Vec::new();
                for (i, target) in targets.iter().enumerate() {
                    let tr = ds.trajectory(i);
                    if let Some(v) = target {
                        if tr.action(t) == a {
                            features.extend(tr.history(t), &mut x);
                            y.push(*v);
                        }
                    }
                }
                if y.is_empty() {
                    return Ok(None);
                }
                spec.fit(&x, cols, &y, 1, None, derive_seed(seed, &[C_Q, t as u64, a as u64])).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        models[t - 1] = fitted;
        if t > 1 {
            let layer = &models[t - 1];
            next = (0..n)
                .into_par_iter()
                .flat_map_iter(|i| {
                    let tr = ds.trajectory(i);
                    let alive = !tr.is_terminal_at(t);
                    let x = if alive { features.extract(tr.history(t)) } else { Vec::new() };
                    layer.iter().map(move |m| match m {
                        Some(m) if alive => m.predict_scalar(&x),
                        _ => f64::NAN,
                    })
                })
                .collect();
        }
    }
    let mode = match policy {
        Some(p) => QMode::Eval(p.label()),
        None => QMode::Opt,
    };
    Ok(QModelSeq {
        mode,
        features: *features,
        horizon,
        num_arms: kn,
        terminal_sentinel: ds.terminal().map(|s| s.sentinel),
        models,
    })
}

/// Q-Opt: backward regressions whose never-treated targets take the best next action.
pub fn q_opt(ds: &Dataset, spec: &RegressorSpec, features: &FeatureSpec, seed: u64) -> Result<QModelSeq> {
    sweep::<dyn WhenToTreatPolicy>(ds, None, spec, features, seed)
}

/// Q-Eval: backward regressions following `π`, plus the mean initial value
/// `Q_1(S_1, π_1(S_1))`.
pub fn q_eval<P: WhenToTreatPolicy + ?Sized>(
    ds: &Dataset,
    pi: &P,
    spec: &RegressorSpec,
    features: &FeatureSpec,
    seed: u64,
) -> Result<(QModelSeq, ValueEstimate)> {
    let q = sweep(ds, Some(pi), spec, features, seed)?;
    let mu = mu_pi_table(&q, ds, pi);
    let c: Vec<f64> = (0..ds.n()).map(|i| mu[i * ds.horizon()]).collect();
    if let Some(pos) = c.iter().position(|v| v.is_nan()) {
        let (_, arm) = observed_stopping_time(pi, ds.trajectory(pos));
        return Err(Error::Unavailable { component: "q", t: 1, arm, fold: 0 });
    }
    Ok((q, ValueEstimate::from_contributions(&c)))
}

/// `μ_π,t(S_{1:t}, A_{1:t-1}) = Q_t(S_{1:t}, π_t)` for every row, `n × T`.
///
/// Terminal rows hold the realized outcome; missing models give `NaN`.
pub fn mu_pi_table<P: WhenToTreatPolicy + ?Sized>(q: &QModelSeq, ds: &Dataset, pi: &P) -> Vec<f64> {
    let horizon = ds.horizon();
    (0..ds.n())
        .into_par_iter()
        .flat_map_iter(|i| {
            let tr = ds.trajectory(i);
            let (tau, arm) = observed_stopping_time(pi, tr);
            (1..=horizon).map(move |t| {
                if tr.is_terminal_at(t) {
                    return tr.outcome();
                }
                let prev = if t > 1 { tr.action(t - 1) } else { 0 };
                let a = if prev != 0 {
                    prev
                } else if t >= tau {
                    arm
                } else {
                    0
                };
                q.q(tr.history(t), a).unwrap_or(f64::NAN)
            })
        })
        .collect()
}

/// Mean over trajectories of `max_a Q_1(S_1, a)`.
pub fn greedy_initial_value(q: &QModelSeq, ds: &Dataset) -> Result<ValueEstimate> {
    let c = ds
        .trajectories()
        .iter()
        .map(|tr| {
            q.best_action(tr.history(1))
                .map(|(_, v)| v)
                .ok_or(Error::Unavailable { component: "q", t: 1, arm: 0, fold: 0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValueEstimate::from_contributions(&c))
}

/// Policy starting the arm with the largest fitted Q value.
#[derive(Clone, Debug)]
pub struct GreedyQPolicy {
    q: QModelSeq,
}

impl GreedyQPolicy {
    pub fn models(&self) -> &QModelSeq {
        &self.q
    }
}

impl WhenToTreatPolicy for GreedyQPolicy {
    fn start_arm(&self, h: History<'_>) -> usize {
        if h.len() > self.q.horizon {
            return 0;
        }
        self.q.best_action(h).map_or(0, |(a, _)| a)
    }

    fn terminal_sentinel(&self) -> Option<f64> {
        self.q.terminal_sentinel
    }

    fn label(&self) -> String {
        "qopt-greedy".into()
    }
}

/// Greedy policy of a Q-Opt fit.
pub fn greedy_policy(q: QModelSeq) -> Result<GreedyQPolicy> {
    if q.mode != QMode::Opt {
        return Err(invalid("greedy extraction needs a Q-Opt fit"));
    }
    Ok(GreedyQPolicy { q })
}

/// Greedy decisions `(i, t, action)` along each observed history.
pub fn greedy_decisions(policy: &GreedyQPolicy, ds: &Dataset) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::with_capacity(ds.n() * ds.horizon());
    for (i, tr) in ds.trajectories().iter().enumerate() {
        for t in 1..=ds.horizon() {
            let a = crate::policy::decide(policy, tr.history(t), &tr.actions()[..t - 1])?;
            out.push((i, t, a));
        }
    }
    Ok(out)
}
