//! Cross-fitted nuisance components.
//!
//! For each fold `q` and time `t` the models are trained on the trajectories
//! outside `q` and used to predict for the trajectories inside `q`:
//!
//! - propensities `e_{t,a}`: a `(K+1)`-class probability model on never-treated,
//!   non-terminal histories;
//! - `mu_now_{t,k}`: regression of `Y` on `S_{1:t}` over `{A_{1:t-1}=0, A_t=k}`;
//! - `mu_next_{t,k}`: regression of `Y` on `S_{1:t}` over `{A_{1:t}=0, A_{t+1}=k}`
//!   weighted by `1/e_{t+1,k}`; at `t=T` the unweighted regression over
//!   `{A_{1:T}=0}` (never starting within the horizon);
//! - terminal settings add `rho_t`, the probability that `S_{t+1}` is terminal,
//!   and `U_{t,k}`, the weighted regression restricted to `S_{t+1}` alive.
//!
//! Predictions for the fitting dataset are cached in a [`NuisanceTable`].

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSpec, FoldPlan, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::regress::{FittedModel, RegressorSpec};
use crate::rng::derive_seed;

/// Default lower clip bound for estimated propensities.
pub const DEFAULT_CLIP: f64 = 0.01;

/// Settings shared by every nuisance fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub regressor: RegressorSpec,
    pub features: FeatureSpec,
    /// Estimated propensities are clipped to `[clip, 1]`.
    pub clip: f64,
    pub seed: u64,
    /// Use the dataset's true behavior probabilities instead of fitting them.
    pub known_propensities: bool,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            regressor: RegressorSpec::default(),
            features: FeatureSpec::default(),
            clip: DEFAULT_CLIP,
            seed: 0,
            known_propensities: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Prediction tables
// ---------------------------------------------------------------------------

/// Per-trajectory nuisance values on a dataset; `NaN` marks unavailable cells.
#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceTable {
    n: usize,
    horizon: usize,
    num_arms: usize,
    e: Vec<f64>,
    mu_now: Vec<f64>,
    mu_next: Vec<f64>,
    rho: Option<Vec<f64>>,
    u: Option<Vec<f64>>,
    folds: Option<Vec<usize>>,
}

impl NuisanceTable {
    /// Table with every cell unavailable.
    pub fn new(n: usize, horizon: usize, num_arms: usize, terminal: bool) -> Self {
        let cells = n * horizon;
        Self {
            n,
            horizon,
            num_arms,
            e: vec![f64::NAN; cells * (num_arms + 1)],
            mu_now: vec![f64::NAN; cells * num_arms],
            mu_next: vec![f64::NAN; cells * num_arms],
            rho: terminal.then(|| vec![f64::NAN; cells]),
            u: terminal.then(|| vec![f64::NAN; cells * num_arms]),
            folds: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    pub fn has_terminal(&self) -> bool {
        self.rho.is_some()
    }

    fn cell(&self, i: usize, t: usize) -> Result<usize> {
        if i >= self.n || t == 0 || t > self.horizon {
            return Err(invalid(format!("nuisance index out of range: i={i}, t={t}")));
        }
        Ok(i * self.horizon + t - 1)
    }

    fn arm_index(&self, i: usize, t: usize, k: usize) -> Result<usize> {
        if k == 0 || k > self.num_arms {
            return Err(invalid(format!("arm {k} outside 1..={}", self.num_arms)));
        }
        Ok(self.cell(i, t)? * self.num_arms + k - 1)
    }

    fn fold(&self, i: usize) -> usize {
        self.folds.as_ref().map_or(0, |f| f[i])
    }

    fn get(&self, v: f64, component: &'static str, i: usize, t: usize, arm: usize) -> Result<f64> {
        if v.is_nan() {
            Err(Error::Unavailable { component, t, arm, fold: self.fold(i) })
        } else {
            Ok(v)
        }
    }

    pub fn e(&self, i: usize, t: usize, a: usize) -> Result<f64> {
        if a > self.num_arms {
            return Err(invalid(format!("action {a} outside 0..={}", self.num_arms)));
        }
        let idx = self.cell(i, t)? * (self.num_arms + 1) + a;
        self.get(self.e[idx], "propensity", i, t, a)
    }

    pub fn mu_now(&self, i: usize, t: usize, k: usize) -> Result<f64> {
        let idx = self.arm_index(i, t, k)?;
        self.get(self.mu_now[idx], "mu_now", i, t, k)
    }

    pub fn mu_next(&self, i: usize, t: usize, k: usize) -> Result<f64> {
        let idx = self.arm_index(i, t, k)?;
        self.get(self.mu_next[idx], "mu_next", i, t, k)
    }

    pub fn rho(&self, i: usize, t: usize) -> Result<f64> {
        let idx = self.cell(i, t)?;
        let rho = self.rho.as_ref().ok_or_else(|| invalid("no terminal components fitted"))?;
        self.get(rho[idx], "rho", i, t, 0)
    }

    pub fn u(&self, i: usize, t: usize, k: usize) -> Result<f64> {
        let idx = self.arm_index(i, t, k)?;
        let u = self.u.as_ref().ok_or_else(|| invalid("no terminal components fitted"))?;
        self.get(u[idx], "U", i, t, k)
    }

    /// `(1 - rho) U + rho H_t`, the continuation value accounting for death at `t+1`.
    pub fn mu_next_terminal(&self, i: usize, t: usize, k: usize, h_t: f64) -> Result<f64> {
        let rho = self.rho(i, t)?;
        Ok((1.0 - rho) * self.u(i, t, k)? + rho * h_t)
    }

    pub fn set_e(&mut self, i: usize, t: usize, probs: &[f64]) {
        let w = self.num_arms + 1;
        let c = i * self.horizon + t - 1;
        self.e[c * w..(c + 1) * w].copy_from_slice(probs);
    }

    pub fn set_mu_now(&mut self, i: usize, t: usize, k: usize, v: f64) {
        let idx = (i * self.horizon + t - 1) * self.num_arms + k - 1;
        self.mu_now[idx] = v;
    }

    pub fn set_mu_next(&mut self, i: usize, t: usize, k: usize, v: f64) {
        let idx = (i * self.horizon + t - 1) * self.num_arms + k - 1;
        self.mu_next[idx] = v;
    }

    pub fn set_rho(&mut self, i: usize, t: usize, v: f64) {
        let idx = i * self.horizon + t - 1;
        if let Some(r) = self.rho.as_mut() {
            r[idx] = v;
        }
    }

    pub fn set_u(&mut self, i: usize, t: usize, k: usize, v: f64) {
        let idx = (i * self.horizon + t - 1) * self.num_arms + k - 1;
        if let Some(u) = self.u.as_mut() {
            u[idx] = v;
        }
    }

    /// Adds `c` to every outcome-model cell (`mu_now`, `mu_next`, `U`).
    pub fn shift_outcome_models(&mut self, c: f64) {
        let shift = |v: &mut f64| *v += c;
        self.mu_now.iter_mut().for_each(shift);
        self.mu_next.iter_mut().for_each(shift);
        if let Some(u) = self.u.as_mut() {
            u.iter_mut().for_each(shift);
        }
    }

    /// Replaces the propensity cells with the dataset's true behavior probabilities.
    pub fn use_true_propensities(&mut self, ds: &Dataset) -> Result<()> {
        let table = ds
            .true_propensity_table()
            .ok_or_else(|| Error::Data("dataset carries no true propensities".into()))?;
        if table.len() != self.e.len() {
            return Err(invalid("true propensity table does not match the nuisance table shape"));
        }
        self.e.copy_from_slice(table);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Fitted nuisance sets
// ---------------------------------------------------------------------------

/// Models fitted on the complement of one fold; `None` marks an empty training cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldModels {
    /// Indexed by `t-1`; `K+1` outputs.
    pub propensity: Vec<Option<FittedModel>>,
    /// Indexed by `[t-1][k-1]`.
    pub mu_now: Vec<Vec<Option<FittedModel>>>,
    pub mu_next: Vec<Vec<Option<FittedModel>>>,
    /// Indexed by `t-1`; the entry at `T` is unused (`rho_T = 0`).
    pub rho: Option<Vec<Option<FittedModel>>>,
    pub u: Option<Vec<Vec<Option<FittedModel>>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: String,
    n: usize,
    horizon: usize,
    num_arms: usize,
    state_dim: usize,
    plan: FoldPlan,
    config: NuisanceConfig,
    terminal: bool,
}

/// Cross-fitted nuisance models plus their predictions on the fitting dataset.
#[derive(Clone, Debug)]
pub struct NuisanceSet {
    manifest: Manifest,
    folds: Vec<FoldModels>,
    table: NuisanceTable,
    e_raw: Vec<f64>,
}

impl NuisanceSet {
    pub fn plan(&self) -> &FoldPlan {
        &self.manifest.plan
    }

    pub fn config(&self) -> &NuisanceConfig {
        &self.manifest.config
    }

    pub fn features(&self) -> &FeatureSpec {
        &self.manifest.config.features
    }

    pub fn clip(&self) -> f64 {
        self.manifest.config.clip
    }

    pub fn table(&self) -> &NuisanceTable {
        &self.table
    }

    pub fn fold_models(&self, q: usize) -> &FoldModels {
        &self.folds[q]
    }

    pub fn has_terminal(&self) -> bool {
        self.manifest.terminal
    }

    /// Clipped propensity `e_{t,a}` for trajectory `i` (exact at terminal states).
    pub fn predict_e(&self, i: usize, t: usize, a: usize) -> Result<f64> {
        self.table.e(i, t, a)
    }

    /// Unclipped model output for `e_{t,a}`.
    pub fn predict_e_raw(&self, i: usize, t: usize, a: usize) -> Result<f64> {
        self.table.e(i, t, a)?;
        let w = self.table.num_arms + 1;
        Ok(self.e_raw[(i * self.table.horizon + t - 1) * w + a])
    }

    pub fn predict_mu_now(&self, i: usize, t: usize, k: usize) -> Result<f64> {
        self.table.mu_now(i, t, k)
    }

    pub fn predict_mu_next(&self, i: usize, t: usize, k: usize) -> Result<f64> {
        self.table.mu_next(i, t, k)
    }

    pub fn predict_rho(&self, i: usize, t: usize) -> Result<f64> {
        self.table.rho(i, t)
    }

    pub fn predict_u(&self, i: usize, t: usize, k: usize) -> Result<f64> {
        self.table.u(i, t, k)
    }

    /// Local advantage `mu_now_{t,k} - mu_next_{t,k}` (diagnostic).
    pub fn delta_local(&self, i: usize, t: usize, k: usize) -> Result<f64> {
        Ok(self.table.mu_now(i, t, k)? - self.table.mu_next(i, t, k)?)
    }

    /// `mu_now_{t+1,k}(S_{1:t+1}) - mu_next_{t,k}(S_{1:t})` for `t < T` (diagnostic).
    pub fn delta_local_plus(&self, i: usize, t: usize, k: usize) -> Result<f64> {
        if t >= self.table.horizon {
            return Err(invalid("delta_local_plus needs t < T"));
        }
        Ok(self.table.mu_now(i, t + 1, k)? - self.table.mu_next(i, t, k)?)
    }

    /// Writes `manifest.json` and one `fold_<q>.json` model file per fold.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (q, models) in self.folds.iter().enumerate() {
            fs::write(dir.join(format!("fold_{q}.json")), serde_json::to_vec(models)?)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    /// Loads models saved by [`NuisanceSet::save`] and predicts on `ds`, which
    /// must be the dataset they were fitted on.
    pub fn load(dir: &Path, ds: &Dataset) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if (manifest.n, manifest.horizon, manifest.num_arms, manifest.state_dim)
            != (ds.n(), ds.horizon(), ds.num_arms(), ds.state_dim())
        {
            return Err(Error::Data("saved nuisance models do not match the dataset shape".into()));
        }
        let folds = (0..manifest.plan.num_folds())
            .map(|q| -> Result<FoldModels> {
                Ok(serde_json::from_slice(&fs::read(dir.join(format!("fold_{q}.json")))?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        assemble(ds, manifest, folds)
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

const C_PROPENSITY: u64 = 1;
const C_NOW: u64 = 2;
const C_NEXT: u64 = 3;
const C_RHO: u64 = 4;

struct Rows {
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    idx: Vec<usize>,
}

impl Rows {
    fn new() -> Self {
        Self { x: Vec::new(), y: Vec::new(), w: Vec::new(), idx: Vec::new() }
    }
}

struct Fitter<'a> {
    ds: &'a Dataset,
    cfg: &'a NuisanceConfig,
    complements: Vec<Vec<usize>>,
}

impl Fitter<'_> {
    fn features(&self, tr: &Trajectory, t: usize, out: &mut Vec<f64>) {
        self.cfg.features.extend(tr.history(t), out);
    }

    fn cols(&self) -> usize {
        self.cfg.features.len(self.ds.state_dim(), self.ds.horizon())
    }

    fn fit(&self, rows: &Rows, outputs: usize, weighted: bool, seed: u64) -> Result<Option<FittedModel>> {
        if rows.idx.is_empty() {
            return Ok(None);
        }
        let w = weighted.then_some(rows.w.as_slice());
        self.cfg.regressor.fit(&rows.x, self.cols(), &rows.y, outputs, w, seed).map(Some)
    }

    fn seed(&self, component: u64, q: usize, t: usize, k: usize) -> u64 {
        derive_seed(self.cfg.seed, &[component, q as u64, t as u64, k as u64])
    }

    fn alive(&self, tr: &Trajectory, t: usize) -> bool {
        !tr.is_terminal_at(t)
    }

    fn propensity(&self, q: usize, t: usize) -> Result<Option<FittedModel>> {
        let k = self.ds.num_arms();
        let mut rows = Rows::new();
        for &j in &self.complements[q] {
            let tr = self.ds.trajectory(j);
            if tr.untreated_before(t) && self.alive(tr, t) {
                self.features(tr, t, &mut rows.x);
                let mut onehot = vec![0.0; k + 1];
                onehot[tr.action(t)] = 1.0;
                rows.y.extend(onehot);
                rows.idx.push(j);
            }
        }
        self.fit(&rows, k + 1, false, self.seed(C_PROPENSITY, q, t, 0))
    }

    /// Clipped propensity used as a training weight for row `j` of fold complement `q`.
    fn weight_propensity(&self, prop: &[Option<FittedModel>], j: usize, t: usize, a: usize) -> Result<f64> {
        if self.cfg.known_propensities {
            return Ok(self.ds.true_propensity(j, t, a).expect("checked before fitting"));
        }
        let model = prop[t - 1].as_ref().ok_or(Error::Unavailable {
            component: "propensity",
            t,
            arm: a,
            fold: usize::MAX,
        })?;
        let tr = self.ds.trajectory(j);
        let p = model.predict(&self.cfg.features.extract(tr.history(t)));
        Ok(p[a].clamp(self.cfg.clip, 1.0))
    }

    fn mu_now(&self, q: usize, t: usize, k: usize) -> Result<Option<FittedModel>> {
        let mut rows = Rows::new();
        for &j in &self.complements[q] {
            let tr = self.ds.trajectory(j);
            if tr.untreated_before(t) && tr.action(t) == k {
                self.features(tr, t, &mut rows.x);
                rows.y.push(tr.outcome());
                rows.idx.push(j);
            }
        }
        self.fit(&rows, 1, false, self.seed(C_NOW, q, t, k))
    }

    /// Rows for `mu_next_{t,k}` (and `U` when `alive_next`) with their weights.
    fn next_rows(
        &self,
        q: usize,
        t: usize,
        k: usize,
        alive_next: bool,
        prop: &[Option<FittedModel>],
    ) -> Result<Rows> {
        let horizon = self.ds.horizon();
        let mut rows = Rows::new();
        for &j in &self.complements[q] {
            let tr = self.ds.trajectory(j);
            if !tr.untreated_before(t + 1) {
                continue;
            }
            if t < horizon {
                if tr.action(t + 1) != k || (alive_next && !self.alive(tr, t + 1)) {
                    continue;
                }
                rows.w.push(1.0 / self.weight_propensity(prop, j, t + 1, k)?);
            } else {
                if alive_next && !self.alive(tr, t) {
                    continue;
                }
                rows.w.push(1.0);
            }
            self.features(tr, t, &mut rows.x);
            rows.y.push(tr.outcome());
            rows.idx.push(j);
        }
        Ok(rows)
    }

    fn mu_next(&self, q: usize, t: usize, k: usize, prop: &[Option<FittedModel>]) -> Result<Option<FittedModel>> {
        let rows = self.next_rows(q, t, k, false, prop)?;
        let key = if t < self.ds.horizon() { k } else { 0 };
        self.fit(&rows, 1, t < self.ds.horizon(), self.seed(C_NEXT, q, t, key))
    }

    fn u(&self, q: usize, t: usize, k: usize, prop: &[Option<FittedModel>]) -> Result<Option<FittedModel>> {
        let rows = self.next_rows(q, t, k, true, prop)?;
        let key = if t < self.ds.horizon() { k } else { 0 };
        self.fit(&rows, 1, t < self.ds.horizon(), self.seed(C_NEXT, q, t, key))
    }

    fn rho(&self, q: usize, t: usize) -> Result<Option<FittedModel>> {
        if t == self.ds.horizon() {
            return Ok(None);
        }
        let mut rows = Rows::new();
        for &j in &self.complements[q] {
            let tr = self.ds.trajectory(j);
            if tr.untreated_before(t + 1) && self.alive(tr, t) {
                self.features(tr, t, &mut rows.x);
                rows.y.push(if tr.is_terminal_at(t + 1) { 1.0 } else { 0.0 });
                rows.idx.push(j);
            }
        }
        self.fit(&rows, 1, false, self.seed(C_RHO, q, t, 0))
    }
}

fn check_inputs(ds: &Dataset, plan: &FoldPlan, cfg: &NuisanceConfig) -> Result<()> {
    if plan.n() != ds.n() {
        return Err(invalid(format!("fold plan covers {} trajectories, dataset has {}", plan.n(), ds.n())));
    }
    if !(cfg.clip > 0.0 && cfg.clip < 1.0) {
        return Err(invalid(format!("propensity clip must lie in (0, 1), got {}", cfg.clip)));
    }
    if cfg.known_propensities && !ds.has_true_propensities() {
        return Err(Error::Data("known-propensity mode requires a dataset with true propensities".into()));
    }
    Ok(())
}

fn fit_all(ds: &Dataset, plan: &FoldPlan, cfg: &NuisanceConfig, outcome: bool, terminal: bool) -> Result<Vec<FoldModels>> {
    let fitter = Fitter {
        ds,
        cfg,
        complements: (0..plan.num_folds()).map(|q| plan.complement(q)).collect(),
    };
    let (qn, tn, kn) = (plan.num_folds(), ds.horizon(), ds.num_arms());

    let propensity: Vec<Vec<Option<FittedModel>>> = if cfg.known_propensities {
        vec![vec![None; tn]; qn]
    } else {
        let jobs: Vec<(usize, usize)> = (0..qn).flat_map(|q| (1..=tn).map(move |t| (q, t))).collect();
        let fitted = jobs
            .par_iter()
            .map(|&(q, t)| fitter.propensity(q, t))
            .collect::<Result<Vec<_>>>()?;
        fitted.chunks(tn).map(<[_]>::to_vec).collect()
    };

    #[derive(Clone, Copy)]
    enum Job {
        Now(usize, usize, usize),
        Next(usize, usize, usize),
        U(usize, usize, usize),
        Rho(usize, usize),
    }
    let mut jobs = Vec::new();
    for q in 0..qn {
        for t in 1..=tn {
            for k in 1..=kn {
                if outcome {
                    jobs.push(Job::Now(q, t, k));
                    jobs.push(Job::Next(q, t, k));
                }
                if terminal {
                    jobs.push(Job::U(q, t, k));
                }
            }
            if terminal {
                jobs.push(Job::Rho(q, t));
            }
        }
    }
    let fitted = jobs
        .par_iter()
        .map(|job| match *job {
            Job::Now(q, t, k) => fitter.mu_now(q, t, k),
            Job::Next(q, t, k) => fitter.mu_next(q, t, k, &propensity[q]),
            Job::U(q, t, k) => fitter.u(q, t, k, &propensity[q]),
            Job::Rho(q, t) => fitter.rho(q, t),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut folds: Vec<FoldModels> = propensity
        .into_iter()
        .map(|p| FoldModels {
            propensity: p,
            mu_now: vec![vec![None; kn]; tn],
            mu_next: vec![vec![None; kn]; tn],
            rho: terminal.then(|| vec![None; tn]),
            u: terminal.then(|| vec![vec![None; kn]; tn]),
        })
        .collect();
    for (job, model) in jobs.into_iter().zip(fitted) {
        match job {
            Job::Now(q, t, k) => folds[q].mu_now[t - 1][k - 1] = model,
            Job::Next(q, t, k) => folds[q].mu_next[t - 1][k - 1] = model,
            Job::U(q, t, k) => folds[q].u.as_mut().expect("terminal")[t - 1][k - 1] = model,
            Job::Rho(q, t) => folds[q].rho.as_mut().expect("terminal")[t - 1] = model,
        }
    }
    Ok(folds)
}

/// Predicts every component for every trajectory from its fold-complement models.
fn assemble(ds: &Dataset, manifest: Manifest, folds: Vec<FoldModels>) -> Result<NuisanceSet> {
    let cfg = &manifest.config;
    let (n, tn, kn) = (ds.n(), ds.horizon(), ds.num_arms());
    let terminal = manifest.terminal;
    let plan = &manifest.plan;
    let w = kn + 1;

    struct RowPred {
        e: Vec<f64>,
        e_raw: Vec<f64>,
        now: Vec<f64>,
        next: Vec<f64>,
        rho: Vec<f64>,
        u: Vec<f64>,
    }
    let preds: Vec<RowPred> = (0..n)
        .into_par_iter()
        .map(|i| {
            let tr = ds.trajectory(i);
            let fm = &folds[plan.fold_of(i)];
            let mut r = RowPred {
                e: vec![f64::NAN; tn * w],
                e_raw: vec![f64::NAN; tn * w],
                now: vec![f64::NAN; tn * kn],
                next: vec![f64::NAN; tn * kn],
                rho: vec![f64::NAN; tn],
                u: vec![f64::NAN; tn * kn],
            };
            let mut x = Vec::new();
            let mut buf = vec![0.0; w];
            for t in 1..=tn {
                x.clear();
                cfg.features.extend(tr.history(t), &mut x);
                let cell = (t - 1) * w..t * w;
                if tr.is_terminal_at(t) {
                    buf.fill(0.0);
                    buf[0] = 1.0;
                    r.e[cell.clone()].copy_from_slice(&buf);
                    r.e_raw[cell].copy_from_slice(&buf);
                } else if cfg.known_propensities {
                    for a in 0..=kn {
                        buf[a] = ds.true_propensity(i, t, a).expect("checked before fitting");
                    }
                    r.e[cell.clone()].copy_from_slice(&buf);
                    r.e_raw[cell].copy_from_slice(&buf);
                } else if let Some(m) = &fm.propensity[t - 1] {
                    m.predict_into(&x, &mut buf);
                    r.e_raw[cell.clone()].copy_from_slice(&buf);
                    for (dst, p) in r.e[cell].iter_mut().zip(&buf) {
                        *dst = p.clamp(cfg.clip, 1.0);
                    }
                }
                for k in 1..=kn {
                    let c = (t - 1) * kn + k - 1;
                    if let Some(m) = &fm.mu_now[t - 1][k - 1] {
                        r.now[c] = m.predict_scalar(&x);
                    }
                    if let Some(m) = &fm.mu_next[t - 1][k - 1] {
                        r.next[c] = m.predict_scalar(&x);
                    }
                    if let Some(u) = &fm.u {
                        if let Some(m) = &u[t - 1][k - 1] {
                            r.u[c] = m.predict_scalar(&x);
                        }
                    }
                }
                if let Some(rho) = &fm.rho {
                    r.rho[t - 1] = if t == tn {
                        0.0
                    } else {
                        rho[t - 1].as_ref().map_or(f64::NAN, |m| m.predict_scalar(&x).clamp(0.0, 1.0))
                    };
                }
            }
            r
        })
        .collect();

    let mut table = NuisanceTable::new(n, tn, kn, terminal);
    table.folds = Some(plan.assignment().to_vec());
    let mut e_raw = Vec::with_capacity(n * tn * w);
    for (i, r) in preds.into_iter().enumerate() {
        let (a, b) = (i * tn, (i + 1) * tn);
        table.e[a * w..b * w].copy_from_slice(&r.e);
        table.mu_now[a * kn..b * kn].copy_from_slice(&r.now);
        table.mu_next[a * kn..b * kn].copy_from_slice(&r.next);
        if let Some(rho) = table.rho.as_mut() {
            rho[a..b].copy_from_slice(&r.rho);
        }
        if let Some(u) = table.u.as_mut() {
            u[a * kn..b * kn].copy_from_slice(&r.u);
        }
        e_raw.extend(r.e_raw);
    }
    Ok(NuisanceSet { manifest, folds, table, e_raw })
}

fn manifest(ds: &Dataset, plan: &FoldPlan, cfg: &NuisanceConfig, terminal: bool) -> Manifest {
    Manifest {
        version: crate::provenance::VERSION.to_string(),
        n: ds.n(),
        horizon: ds.horizon(),
        num_arms: ds.num_arms(),
        state_dim: ds.state_dim(),
        plan: plan.clone(),
        config: cfg.clone(),
        terminal,
    }
}

/// Fits propensities, `mu_now` and `mu_next` by cross-fitting, plus the
/// terminal components when the dataset has a terminal spec.
///
/// Empty training cells are recorded as unavailable; using them later errors.
pub fn fit_nuisances(ds: &Dataset, plan: &FoldPlan, cfg: &NuisanceConfig) -> Result<NuisanceSet> {
    check_inputs(ds, plan, cfg)?;
    let terminal = ds.terminal().is_some();
    let folds = fit_all(ds, plan, cfg, true, terminal)?;
    assemble(ds, manifest(ds, plan, cfg, terminal), folds)
}

/// Fits only the terminal components `rho` and `U` (plus the propensities
/// needed for the weights of `U`).
pub fn fit_terminal(ds: &Dataset, plan: &FoldPlan, cfg: &NuisanceConfig) -> Result<NuisanceSet> {
    check_inputs(ds, plan, cfg)?;
    if ds.terminal().is_none() {
        return Err(Error::Data("terminal components need a dataset with a terminal spec".into()));
    }
    let folds = fit_all(ds, plan, cfg, false, true)?;
    assemble(ds, manifest(ds, plan, cfg, true), folds)
}

// ---------------------------------------------------------------------------
// Propensity sources for importance weighting
// ---------------------------------------------------------------------------

/// Behavior probabilities `P(A_t = a | S_{1:t}, A_{1:t-1} = 0)` per trajectory.
pub trait PropensitySource: Sync {
    fn prob(&self, i: usize, t: usize, a: usize) -> Result<f64>;
}

impl PropensitySource for NuisanceSet {
    fn prob(&self, i: usize, t: usize, a: usize) -> Result<f64> {
        self.predict_e(i, t, a)
    }
}

impl PropensitySource for NuisanceTable {
    fn prob(&self, i: usize, t: usize, a: usize) -> Result<f64> {
        self.e(i, t, a)
    }
}

/// The simulator-provided probabilities carried by a dataset.
pub struct TruePropensities<'a>(pub &'a Dataset);

impl PropensitySource for TruePropensities<'_> {
    fn prob(&self, i: usize, t: usize, a: usize) -> Result<f64> {
        if self.0.trajectory(i).is_terminal_at(t) {
            return Ok(if a == 0 { 1.0 } else { 0.0 });
        }
        self.0
            .true_propensity(i, t, a)
            .ok_or_else(|| Error::Data("dataset carries no true propensities".into()))
    }
}
