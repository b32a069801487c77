//! Value and contrast estimators.
//!
//! ADR evaluates a policy against never-treating through per-trajectory score
//! vectors `Γ` of length `KT+1`: entry `K(t-1)+k` holds `Σ_{t'>=t} w_t' Ψ_{t',k}`
//! where `w_t = 1{A_{1:t-1}=0} / Π_{t'<t} e_{t',0}` and `Ψ` is the doubly
//! robust advantage score. A policy's estimate is the mean of `Γ` at its hot
//! index, so scores are built once and reused for every policy.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Dataset, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::nuisance::{NuisanceTable, PropensitySource};
use crate::policy::{observed_stopping_time, WhenToTreatPolicy};
use crate::provenance::Provenance;

// ---------------------------------------------------------------------------
// Value estimates
// ---------------------------------------------------------------------------

/// Point estimate with a standard error from per-trajectory contributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueEstimate {
    pub estimate: f64,
    pub se: f64,
    pub n: usize,
}

impl ValueEstimate {
    /// Mean of `c` with standard error `sd(c)/sqrt(n)`.
    pub fn from_contributions(c: &[f64]) -> Self {
        let n = c.len();
        let mean = c.iter().sum::<f64>() / n as f64;
        Self { estimate: mean, se: standard_error(c, mean), n }
    }

    /// `estimate` with the standard error of the linearized contributions `infl`.
    pub fn with_influence(estimate: f64, infl: &[f64]) -> Self {
        let mean = infl.iter().sum::<f64>() / infl.len() as f64;
        Self { estimate, se: standard_error(infl, mean), n: infl.len() }
    }
}

fn standard_error(c: &[f64], mean: f64) -> f64 {
    let n = c.len();
    if n < 2 {
        return 0.0;
    }
    let ss: f64 = c.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Advantage scores
// ---------------------------------------------------------------------------

/// Ingredients of one doubly robust advantage score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsiParts {
    pub mu_now: f64,
    pub mu_next: f64,
    pub y: f64,
    /// `e_{t,k}` when `A_t = k`.
    pub now_propensity: Option<f64>,
    /// `e_{t,0} e_{t+1,k}` when `A_t = 0` and `A_{t+1} = k`; `e_{T,0}` at `t = T`.
    pub next_propensity: Option<f64>,
    /// Regression subtracted from `Y` in the last term.
    pub next_base: f64,
}

impl PsiParts {
    pub fn score(&self) -> f64 {
        let mut psi = self.mu_now - self.mu_next;
        if let Some(e) = self.now_propensity {
            psi += (self.y - self.mu_now) / e;
        }
        if let Some(e) = self.next_propensity {
            psi -= (self.y - self.next_base) / e;
        }
        psi
    }
}

fn check_shape(ds: &Dataset, table: &NuisanceTable) -> Result<()> {
    if (table.n(), table.horizon(), table.num_arms()) != (ds.n(), ds.horizon(), ds.num_arms()) {
        return Err(invalid("nuisance table does not match the dataset shape"));
    }
    Ok(())
}

/// `H_t` for a trajectory alive at `t`.
fn terminal_value(ds: &Dataset, t: usize) -> Result<f64> {
    let spec = ds.terminal().ok_or_else(|| Error::Data("dataset has no terminal spec".into()))?;
    Ok(spec.outcome.evaluate(t))
}

fn psi_parts(ds: &Dataset, table: &NuisanceTable, i: usize, t: usize, k: usize, terminal: bool) -> Result<PsiParts> {
    let tr = ds.trajectory(i);
    let horizon = ds.horizon();
    let a_t = tr.action(t);
    let mu_now = table.mu_now(i, t, k)?;
    let (mu_next, next_base) = if terminal {
        let u = table.u(i, t, k)?;
        (table.mu_next_terminal(i, t, k, terminal_value(ds, t)?)?, u)
    } else {
        let next = table.mu_next(i, t, k)?;
        (next, next)
    };
    let now_propensity = if a_t == k { Some(table.e(i, t, k)?) } else { None };
    let next_propensity = if a_t != 0 {
        None
    } else if t == horizon {
        Some(table.e(i, t, 0)?)
    } else if tr.action(t + 1) == k {
        Some(table.e(i, t, 0)? * table.e(i, t + 1, k)?)
    } else {
        None
    };
    Ok(PsiParts { mu_now, mu_next, y: tr.outcome(), now_propensity, next_propensity, next_base })
}

/// Doubly robust advantage score `Ψ_{t,k}` of trajectory `i`.
pub fn psi_score(ds: &Dataset, table: &NuisanceTable, i: usize, t: usize, k: usize) -> Result<f64> {
    Ok(psi_parts(ds, table, i, t, k, false)?.score())
}

/// Terminal-state score `Ψ^Φ_{t,k}`: the continuation is `(1-ρ)U + ρH_t` and
/// the last residual is taken against `U`. Zero at terminal states.
pub fn psi_score_terminal(ds: &Dataset, table: &NuisanceTable, i: usize, t: usize, k: usize) -> Result<f64> {
    if ds.trajectory(i).is_terminal_at(t) {
        return Ok(0.0);
    }
    Ok(psi_parts(ds, table, i, t, k, true)?.score())
}

/// Per-trajectory weights, scores and score vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    horizon: usize,
    num_arms: usize,
    terminal: bool,
    w: Vec<f64>,
    psi: Vec<f64>,
    gamma: Vec<f64>,
}

impl ScoreMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    /// Length `KT+1` of each score vector.
    pub fn width(&self) -> usize {
        self.num_arms * self.horizon + 1
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Never-treat weight `w_t` (zeroed at terminal states in the terminal variant).
    pub fn weight(&self, i: usize, t: usize) -> f64 {
        self.w[i * self.horizon + t - 1]
    }

    /// `Ψ_{t,k}`; stored as 0 where the weight vanishes.
    pub fn psi(&self, i: usize, t: usize, k: usize) -> f64 {
        self.psi[(i * self.horizon + t - 1) * self.num_arms + k - 1]
    }

    /// Score vector of trajectory `i`.
    pub fn gamma_row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.gamma[i * w..(i + 1) * w]
    }

    /// Entry `idx` (1-based) of the score vector of trajectory `i`.
    pub fn gamma(&self, i: usize, idx: usize) -> f64 {
        self.gamma_row(i)[idx - 1]
    }

    /// Writes the `n × (KT+1)` score vectors as CSV after a header manifest.
    pub fn save(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        writeln!(f, "{}", prov.header())?;
        writeln!(
            f,
            "# n={} horizon={} num_arms={} terminal={}",
            self.n, self.horizon, self.num_arms, self.terminal
        )?;
        let cols: Vec<String> = (1..=self.width()).map(|j| format!("gamma_{j}")).collect();
        writeln!(f, "{}", cols.join(","))?;
        for i in 0..self.n {
            let row: Vec<String> = self.gamma_row(i).iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

fn build(ds: &Dataset, table: &NuisanceTable, terminal: bool) -> Result<ScoreMatrix> {
    check_shape(ds, table)?;
    let (n, horizon, kn) = (ds.n(), ds.horizon(), ds.num_arms());
    let width = kn * horizon + 1;
    let rows = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let tr = ds.trajectory(i);
            let mut w = vec![0.0; horizon];
            let mut psi = vec![0.0; horizon * kn];
            let mut prefix = 1.0;
            for t in 1..=horizon {
                if !tr.untreated_before(t) {
                    break;
                }
                if t > 1 {
                    prefix /= table.e(i, t - 1, 0)?;
                }
                if terminal && tr.is_terminal_at(t) {
                    break;
                }
                w[t - 1] = prefix;
                for k in 1..=kn {
                    psi[(t - 1) * kn + k - 1] = psi_parts(ds, table, i, t, k, terminal)?.score();
                }
            }
            let mut gamma = vec![0.0; width];
            for k in 1..=kn {
                let mut acc = 0.0;
                for t in (1..=horizon).rev() {
                    acc += w[t - 1] * psi[(t - 1) * kn + k - 1];
                    gamma[kn * (t - 1) + k - 1] = acc;
                }
            }
            Ok((w, psi, gamma))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sm = ScoreMatrix {
        n,
        horizon,
        num_arms: kn,
        terminal,
        w: Vec::with_capacity(n * horizon),
        psi: Vec::with_capacity(n * horizon * kn),
        gamma: Vec::with_capacity(n * width),
    };
    for (w, psi, gamma) in rows {
        sm.w.extend(w);
        sm.psi.extend(psi);
        sm.gamma.extend(gamma);
    }
    Ok(sm)
}

/// Score matrix from cross-fitted (or any) nuisance predictions.
pub fn build_scores(ds: &Dataset, table: &NuisanceTable) -> Result<ScoreMatrix> {
    build(ds, table, false)
}

/// Terminal-state score matrix; requires `rho` and `U` in the table.
pub fn build_scores_terminal(ds: &Dataset, table: &NuisanceTable) -> Result<ScoreMatrix> {
    if !table.has_terminal() || ds.terminal().is_none() {
        return Err(invalid("terminal scores need a terminal dataset and terminal nuisances"));
    }
    build(ds, table, true)
}

/// Score matrix from ground-truth components (no cross-fitting, no clipping);
/// uses the terminal form when the table carries terminal components.
pub fn oracle_scores(ds: &Dataset, truth: &NuisanceTable) -> Result<ScoreMatrix> {
    if truth.has_terminal() {
        build_scores_terminal(ds, truth)
    } else {
        build_scores(ds, truth)
    }
}

// ---------------------------------------------------------------------------
// ADR contrasts
// ---------------------------------------------------------------------------

fn hot_index<P: WhenToTreatPolicy + ?Sized>(policy: &P, tr: &Trajectory, num_arms: usize) -> usize {
    let (tau, arm) = observed_stopping_time(policy, tr);
    if tau <= tr.horizon() && arm != 0 {
        num_arms * (tau - 1) + arm
    } else {
        num_arms * tr.horizon() + 1
    }
}

/// Per-trajectory contributions `<π(H) - π'(H), Γ>`.
pub fn adr_contributions<P, Q>(sm: &ScoreMatrix, ds: &Dataset, pi: &P, pi_ref: &Q) -> Result<Vec<f64>>
where
    P: WhenToTreatPolicy + ?Sized,
    Q: WhenToTreatPolicy + ?Sized,
{
    if sm.n() != ds.n() || sm.horizon() != ds.horizon() || sm.num_arms() != ds.num_arms() {
        return Err(invalid("score matrix does not match the dataset shape"));
    }
    let kn = ds.num_arms();
    Ok((0..ds.n())
        .map(|i| {
            let tr = ds.trajectory(i);
            sm.gamma(i, hot_index(pi, tr, kn)) - sm.gamma(i, hot_index(pi_ref, tr, kn))
        })
        .collect())
}

/// ADR estimate of `V(π) - V(π')`.
pub fn adr_delta<P, Q>(sm: &ScoreMatrix, ds: &Dataset, pi: &P, pi_ref: &Q) -> Result<ValueEstimate>
where
    P: WhenToTreatPolicy + ?Sized,
    Q: WhenToTreatPolicy + ?Sized,
{
    Ok(ValueEstimate::from_contributions(&adr_contributions(sm, ds, pi, pi_ref)?))
}

/// ADR estimate of `V(π) - V(0)`.
pub fn adr_advantage<P: WhenToTreatPolicy + ?Sized>(sm: &ScoreMatrix, ds: &Dataset, pi: &P) -> Result<ValueEstimate> {
    adr_delta(sm, ds, pi, &crate::policy::LinearThresholdPolicy::never())
}

// ---------------------------------------------------------------------------
// Normalized ADR
// ---------------------------------------------------------------------------

/// Per-time numerators and denominators of the three normalized blocks,
/// with each trajectory's share kept for the linearized standard error.
struct Blocks {
    horizon: usize,
    /// `[block][t-1]` sums.
    num: [Vec<f64>; 3],
    den: [Vec<f64>; 3],
    /// Per trajectory: `[block][t-1]` numerator and denominator terms.
    rows: Vec<[Vec<(f64, f64)>; 3]>,
}

fn weighted_blocks<P: WhenToTreatPolicy + ?Sized>(
    ds: &Dataset,
    table: &NuisanceTable,
    pi: &P,
    terminal: bool,
) -> Result<Blocks> {
    check_shape(ds, table)?;
    let horizon = ds.horizon();
    let rows = (0..ds.n())
        .into_par_iter()
        .map(|i| -> Result<[Vec<(f64, f64)>; 3]> {
            let tr = ds.trajectory(i);
            let (tau, arm) = observed_stopping_time(pi, tr);
            let y = tr.outcome();
            let mut out = [vec![(0.0, 0.0); horizon], vec![(0.0, 0.0); horizon], vec![(0.0, 0.0); horizon]];
            let mut w = 1.0;
            for t in 1..=horizon {
                if !tr.untreated_before(t) {
                    break;
                }
                if t > 1 {
                    w /= table.e(i, t - 1, 0)?;
                }
                let alive = !(terminal && tr.is_terminal_at(t));
                let g = t >= tau && arm != 0 && alive;
                let (mut n1, mut n2, mut a2, mut n3, mut a3, mut b3) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                if g {
                    let now = table.mu_now(i, t, arm)?;
                    let (next, base) = if terminal {
                        (table.mu_next_terminal(i, t, arm, terminal_value(ds, t)?)?, table.u(i, t, arm)?)
                    } else {
                        let next = table.mu_next(i, t, arm)?;
                        (next, next)
                    };
                    n1 = w * (now - next);
                    if tr.action(t) == arm {
                        a2 = w / table.e(i, t, arm)?;
                        n2 = a2 * (y - now);
                    }
                    if tr.action(t) == 0 {
                        let w_next = w / table.e(i, t, 0)?;
                        if t == horizon {
                            a3 = w_next;
                        } else if tr.action(t + 1) == arm {
                            a3 = w_next / table.e(i, t + 1, arm)?;
                        } else if terminal && tr.is_terminal_at(t + 1) {
                            b3 = w_next;
                        }
                        n3 = a3 * (y - base);
                    }
                }
                let c = if g { 0.0 } else { w };
                out[0][t - 1] = (n1, w);
                out[1][t - 1] = (n2, a2 + c);
                out[2][t - 1] = (n3, a3 + b3 + c);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut num = [vec![0.0; horizon], vec![0.0; horizon], vec![0.0; horizon]];
    let mut den = num.clone();
    for row in &rows {
        for b in 0..3 {
            for t in 0..horizon {
                num[b][t] += row[b][t].0;
                den[b][t] += row[b][t].1;
            }
        }
    }
    Ok(Blocks { horizon, num, den, rows })
}

const BLOCK_NAMES: [&str; 3] = ["advantage block", "current residual block", "continuation residual block"];
const BLOCK_SIGNS: [f64; 3] = [1.0, 1.0, -1.0];

fn normalized_estimate(b: &Blocks) -> Result<ValueEstimate> {
    let n = b.rows.len();
    let mut point = 0.0;
    let mut ratio = [vec![0.0; b.horizon], vec![0.0; b.horizon], vec![0.0; b.horizon]];
    for blk in 0..3 {
        for t in 0..b.horizon {
            if b.den[blk][t] == 0.0 {
                return Err(Error::DegenerateNormalization { t: t + 1, what: BLOCK_NAMES[blk] });
            }
            ratio[blk][t] = b.num[blk][t] / b.den[blk][t];
            point += BLOCK_SIGNS[blk] * ratio[blk][t];
        }
    }
    let infl: Vec<f64> = b
        .rows
        .iter()
        .map(|row| {
            let mut c = 0.0;
            for blk in 0..3 {
                for t in 0..b.horizon {
                    let (num, den) = row[blk][t];
                    let mean_den = b.den[blk][t] / n as f64;
                    c += BLOCK_SIGNS[blk] * (num - ratio[blk][t] * den) / mean_den;
                }
            }
            c
        })
        .collect();
    Ok(ValueEstimate::with_influence(point, &infl))
}

/// Self-normalized ADR estimate of `V(π) - V(0)`.
///
/// Each of the three score blocks is normalized per time step; a zero
/// denominator yields [`Error::DegenerateNormalization`] naming `t`.
pub fn adr_delta_weighted<P: WhenToTreatPolicy + ?Sized>(
    ds: &Dataset,
    table: &NuisanceTable,
    pi: &P,
) -> Result<ValueEstimate> {
    normalized_estimate(&weighted_blocks(ds, table, pi, false)?)
}

/// Self-normalized terminal-state ADR estimate of `V(π) - V(0)`.
pub fn adr_delta_weighted_terminal<P: WhenToTreatPolicy + ?Sized>(
    ds: &Dataset,
    table: &NuisanceTable,
    pi: &P,
) -> Result<ValueEstimate> {
    if !table.has_terminal() || ds.terminal().is_none() {
        return Err(invalid("terminal estimator needs a terminal dataset and terminal nuisances"));
    }
    normalized_estimate(&weighted_blocks(ds, table, pi, true)?)
}

// ---------------------------------------------------------------------------
// Importance weighting
// ---------------------------------------------------------------------------

/// Cumulative weights `γ_0..γ_T` of trajectory `i` under `π`.
///
/// Once treatment has started, or at a terminal state, the behavior action is
/// deterministic, so matching steps contribute a factor of 1.
pub fn importance_weights<P, E>(ds: &Dataset, i: usize, pi: &P, e: &E) -> Result<Vec<f64>>
where
    P: WhenToTreatPolicy + ?Sized,
    E: PropensitySource + ?Sized,
{
    let tr = ds.trajectory(i);
    let (tau, arm) = observed_stopping_time(pi, tr);
    let mut gamma = vec![1.0; ds.horizon() + 1];
    for t in 1..=ds.horizon() {
        let prev = if t > 1 { tr.action(t - 1) } else { 0 };
        let prescribed = if tr.is_terminal_at(t) {
            0
        } else if prev != 0 {
            prev
        } else if t >= tau {
            arm
        } else {
            0
        };
        let g = gamma[t - 1];
        gamma[t] = if g == 0.0 || tr.action(t) != prescribed {
            0.0
        } else if prev != 0 || tr.is_terminal_at(t) {
            g
        } else {
            g / e.prob(i, t, prescribed)?
        };
    }
    Ok(gamma)
}

fn final_weights<P, E>(ds: &Dataset, pi: &P, e: &E) -> Result<Vec<f64>>
where
    P: WhenToTreatPolicy + ?Sized,
    E: PropensitySource + ?Sized,
{
    (0..ds.n())
        .into_par_iter()
        .map(|i| importance_weights(ds, i, pi, e).map(|g| g[ds.horizon()]))
        .collect()
}

/// IPW value `mean(γ_T Y)`.
pub fn ipw_value<P, E>(ds: &Dataset, pi: &P, e: &E) -> Result<ValueEstimate>
where
    P: WhenToTreatPolicy + ?Sized,
    E: PropensitySource + ?Sized,
{
    let g = final_weights(ds, pi, e)?;
    let c: Vec<f64> = g.iter().zip(ds.trajectories()).map(|(g, tr)| g * tr.outcome()).collect();
    Ok(ValueEstimate::from_contributions(&c))
}

/// Self-normalized IPW value `Σ γ_T Y / Σ γ_T`.
pub fn wipw_value<P, E>(ds: &Dataset, pi: &P, e: &E) -> Result<ValueEstimate>
where
    P: WhenToTreatPolicy + ?Sized,
    E: PropensitySource + ?Sized,
{
    let g = final_weights(ds, pi, e)?;
    let total: f64 = g.iter().sum();
    if total == 0.0 {
        return Err(Error::NoMatchingTrajectory(pi.label()));
    }
    let point = g.iter().zip(ds.trajectories()).map(|(g, tr)| g * tr.outcome()).sum::<f64>() / total;
    let mean_g = total / g.len() as f64;
    let infl: Vec<f64> = g
        .iter()
        .zip(ds.trajectories())
        .map(|(g, tr)| g * (tr.outcome() - point) / mean_g)
        .collect();
    Ok(ValueEstimate::with_influence(point, &infl))
}

/// Doubly robust value `mean(γ_T Y - Σ_t (γ_t - γ_{t-1}) μ_π,t)`.
///
/// `mu_pi` holds `μ_π,t(S_{1:t}, A_{1:t-1})` row-major as `n × T`; `NaN` marks
/// a missing value, which is an error wherever the weights change.
pub fn aipw_value<P, E>(ds: &Dataset, pi: &P, e: &E, mu_pi: &[f64]) -> Result<ValueEstimate>
where
    P: WhenToTreatPolicy + ?Sized,
    E: PropensitySource + ?Sized,
{
    let horizon = ds.horizon();
    if mu_pi.len() != ds.n() * horizon {
        return Err(invalid(format!("expected {} policy values, got {}", ds.n() * horizon, mu_pi.len())));
    }
    let c = (0..ds.n())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let g = importance_weights(ds, i, pi, e)?;
            let mut v = g[horizon] * ds.trajectory(i).outcome();
            for t in 1..=horizon {
                let dg = g[t] - g[t - 1];
                if dg != 0.0 {
                    let mu = mu_pi[i * horizon + t - 1];
                    if mu.is_nan() {
                        return Err(Error::Unavailable { component: "mu_pi", t, arm: 0, fold: 0 });
                    }
                    v -= dg * mu;
                }
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValueEstimate::from_contributions(&c))
}
