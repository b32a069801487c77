//! Grid-search policy learning and the simulation benchmark.
//!
//! A benchmark repetition simulates a dataset, fits the nuisances once,
//! evaluates every grid policy with each estimator, picks the argmax and
//! scores it against oracle values obtained by paired Monte Carlo rollouts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;

use crate::data::{assign_folds, Dataset, FeatureMode, FeatureSpec};
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    adr_advantage, adr_delta_weighted, adr_delta_weighted_terminal, build_scores, build_scores_terminal, ipw_value,
    wipw_value, ValueEstimate,
};
use crate::fittedq::{greedy_policy, q_opt};
use crate::nuisance::{fit_nuisances, NuisanceConfig, NuisanceTable, PropensitySource};
use crate::policy::{binary_grid, multi_grid, LinearThresholdPolicy, PolicyGrid};
use crate::provenance::{config_hash, Provenance};
use crate::regress::{ForestParams, RegressorSpec};
use crate::rng::derive_seed;
use crate::sim::{rollout_deltas, BinaryParams, MultiParams, Setup, DEATH_SENTINEL};

/// Environment variable naming the oracle cache directory.
pub const CACHE_ENV: &str = "ADR_CACHE_DIR";

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

/// Method used to score or learn policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    Adr,
    AdrWeighted,
    AdrTerminal,
    AdrWeightedTerminal,
    Ipw,
    Wipw,
    Aipw,
    QOpt,
}

impl Estimator {
    pub const ALL: [Estimator; 8] = [
        Estimator::Adr,
        Estimator::AdrWeighted,
        Estimator::AdrTerminal,
        Estimator::AdrWeightedTerminal,
        Estimator::Ipw,
        Estimator::Wipw,
        Estimator::Aipw,
        Estimator::QOpt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Adr => "adr",
            Estimator::AdrWeighted => "adr-w",
            Estimator::AdrTerminal => "adr-term",
            Estimator::AdrWeightedTerminal => "adr-w-term",
            Estimator::Ipw => "ipw",
            Estimator::Wipw => "wipw",
            Estimator::Aipw => "aipw",
            Estimator::QOpt => "qopt",
        }
    }

    /// Whether the estimator scores grid policies one by one.
    pub fn scores_grid(&self) -> bool {
        !matches!(self, Estimator::QOpt | Estimator::Aipw)
    }

    fn needs_terminal(&self) -> bool {
        matches!(self, Estimator::AdrTerminal | Estimator::AdrWeightedTerminal)
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| invalid(format!("unknown estimator '{s}'")))
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything needed to score policies on one dataset.
pub struct EvalContext<'a> {
    pub ds: &'a Dataset,
    /// Nuisance predictions; required by the ADR variants.
    pub table: Option<&'a NuisanceTable>,
    /// Propensities used by the importance-weighting estimators.
    pub propensities: &'a dyn PropensitySource,
}

/// Estimates of `V(π) - V(0)` for every policy; failures keep their error.
pub fn evaluate_grid(ctx: &EvalContext<'_>, grid: &[LinearThresholdPolicy], est: Estimator) -> Result<Vec<Result<ValueEstimate>>> {
    if !est.scores_grid() {
        return Err(invalid(format!("estimator {est} does not score policy grids")));
    }
    if est.needs_terminal() && ctx.ds.terminal().is_none() {
        return Err(invalid(format!("estimator {est} needs a dataset with a terminal state")));
    }
    let table = || ctx.table.ok_or_else(|| invalid(format!("estimator {est} needs fitted nuisances")));
    Ok(match est {
        Estimator::Adr | Estimator::AdrTerminal => {
            let sm = if est == Estimator::Adr {
                build_scores(ctx.ds, table()?)?
            } else {
                build_scores_terminal(ctx.ds, table()?)?
            };
            grid.par_iter().map(|pi| adr_advantage(&sm, ctx.ds, pi)).collect()
        }
        Estimator::AdrWeighted => {
            let t = table()?;
            grid.par_iter().map(|pi| adr_delta_weighted(ctx.ds, t, pi)).collect()
        }
        Estimator::AdrWeightedTerminal => {
            let t = table()?;
            grid.par_iter().map(|pi| adr_delta_weighted_terminal(ctx.ds, t, pi)).collect()
        }
        Estimator::Ipw | Estimator::Wipw => {
            let value = |pi: &LinearThresholdPolicy| {
                if est == Estimator::Ipw {
                    ipw_value(ctx.ds, pi, ctx.propensities)
                } else {
                    wipw_value(ctx.ds, pi, ctx.propensities)
                }
            };
            let mut never = LinearThresholdPolicy::never();
            if let Some(spec) = ctx.ds.terminal() {
                never = never.respecting_terminal(spec.sentinel);
            }
            let base = value(&never)?;
            grid.par_iter()
                .map(|pi| {
                    value(pi).map(|v| ValueEstimate {
                        estimate: v.estimate - base.estimate,
                        se: (v.se * v.se + base.se * base.se).sqrt(),
                        n: v.n,
                    })
                })
                .collect()
        }
        Estimator::Aipw | Estimator::QOpt => unreachable!(),
    })
}

/// Result of a grid search.
#[derive(Clone, Debug)]
pub struct LearnedPolicy {
    /// Grid index of the chosen policy.
    pub index: usize,
    pub policy: LinearThresholdPolicy,
    /// Per-policy estimates; `None` where evaluation failed.
    pub estimates: Vec<Option<ValueEstimate>>,
    /// Grid index and message of every failed evaluation.
    pub failures: Vec<(usize, String)>,
}

/// Index of the largest finite estimate; the first in grid order wins ties.
pub fn argmax_first(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v.filter(|v| v.is_finite()) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// `argmax_π Δ̂(π, 0)` over the grid; policies whose evaluation fails are
/// excluded with a warning.
pub fn learn_policy(ctx: &EvalContext<'_>, grid: &PolicyGrid, est: Estimator) -> Result<LearnedPolicy> {
    if grid.is_empty() {
        return Err(invalid("policy grid is empty"));
    }
    let results = evaluate_grid(ctx, grid.policies(), est)?;
    let mut estimates = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => estimates.push(Some(v)),
            Err(e) => {
                warn!("{est}: policy {} excluded: {e}", grid.get(i));
                failures.push((i, e.to_string()));
                estimates.push(None);
            }
        }
    }
    let values: Vec<Option<f64>> = estimates.iter().map(|e| e.map(|v| v.estimate)).collect();
    let index = argmax_first(&values).ok_or_else(|| {
        let first = failures.first().map_or_else(String::new, |(_, m)| m.clone());
        Error::AllPoliciesFailed(format!("{est}: {first}"))
    })?;
    Ok(LearnedPolicy { index, policy: grid.get(index).clone(), estimates, failures })
}

/// Mean over the grid of `(estimate - oracle)²`.
pub fn mse_vs_oracle(estimates: &[f64], oracle: &[f64]) -> Result<f64> {
    if estimates.len() != oracle.len() || estimates.is_empty() {
        return Err(invalid(format!(
            "misaligned grids: {} estimates vs {} oracle values",
            estimates.len(),
            oracle.len()
        )));
    }
    Ok(estimates.iter().zip(oracle).map(|(e, o)| (e - o) * (e - o)).sum::<f64>() / estimates.len() as f64)
}

// ---------------------------------------------------------------------------
// Oracle grid values
// ---------------------------------------------------------------------------

/// Oracle `V(π) - V(0)` for every grid policy, read from or written to the
/// cache directory when one is given.
pub fn oracle_grid(
    setup: &Setup,
    grid: &PolicyGrid,
    rollouts: usize,
    seed: u64,
    cache: Option<&Path>,
) -> Result<Vec<ValueEstimate>> {
    let labels: Vec<String> = grid.policies().iter().map(ToString::to_string).collect();
    let key = config_hash(&format!("{setup:?}|{rollouts}|{seed}|{}", labels.join(";")));
    let path = cache.map(|d| d.join(format!("oracle-{}-{key}.csv", setup.name())));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        match read_oracle(p, &labels) {
            Ok(v) => {
                info!("oracle values loaded from {}", p.display());
                return Ok(v);
            }
            Err(e) => warn!("ignoring unreadable oracle cache {}: {e}", p.display()),
        }
    }
    info!("computing oracle values for {} policies with {rollouts} rollouts", grid.len());
    let values = rollout_deltas(setup, grid.policies(), rollouts, seed)?;
    if let Some(p) = path {
        let prov = Provenance::new(Some(seed), &format!("{setup:?} rollouts={rollouts}"));
        write_oracle(&p, &prov, &labels, &values)?;
    }
    Ok(values)
}

/// `policy,estimate,se` rows under a provenance line; labels are quoted.
pub fn oracle_csv(prov: &Provenance, labels: &[String], values: &[ValueEstimate]) -> String {
    let mut out = format!("{}\npolicy,estimate,se\n", prov.header());
    for (l, v) in labels.iter().zip(values) {
        out += &format!("\"{l}\",{},{}\n", v.estimate, v.se);
    }
    out
}

/// Writes [`oracle_csv`] atomically via a temporary file.
pub fn write_oracle(path: &Path, prov: &Provenance, labels: &[String], values: &[ValueEstimate]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, oracle_csv(prov, labels, values))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_oracle(path: &Path, labels: &[String]) -> Result<Vec<ValueEstimate>> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    if rows.len() != labels.len() {
        return Err(Error::Data(format!("cache has {} rows, expected {}", rows.len(), labels.len())));
    }
    rows.iter()
        .zip(labels)
        .map(|(row, label)| {
            // Labels contain commas, so split from the right.
            let mut parts = row.rsplitn(3, ',');
            let se = parts.next().and_then(|v| v.parse().ok());
            let est = parts.next().and_then(|v| v.parse().ok());
            match (parts.next(), est, se) {
                (Some(l), Some(estimate), Some(se)) if l.trim_matches('"') == label => Ok(ValueEstimate { estimate, se, n: 0 }),
                _ => Err(Error::Data(format!("cache row '{row}' does not match policy {label}"))),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Benchmark configuration, read from a `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub setup: Setup,
    pub sample_sizes: Vec<usize>,
    pub repetitions: usize,
    pub estimators: Vec<Estimator>,
    pub rollouts: usize,
    pub seed: u64,
    pub folds: usize,
    pub nuisance: NuisanceConfig,
    /// Optional policy grid file; the setup's default grid otherwise.
    pub grid: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for a setup.
    pub fn defaults(setup: Setup) -> Self {
        let (estimators, known) = match setup {
            Setup::Binary(_) => (vec![Estimator::AdrWeighted, Estimator::Ipw, Estimator::QOpt], false),
            Setup::Multi(_) => (vec![Estimator::AdrWeightedTerminal, Estimator::Ipw, Estimator::QOpt], true),
        };
        Self {
            setup,
            sample_sizes: vec![5000],
            repetitions: 10,
            estimators,
            rollouts: 5000,
            seed: 0,
            folds: 5,
            nuisance: NuisanceConfig {
                regressor: RegressorSpec::Forest(ForestParams::default()),
                features: FeatureSpec { mode: FeatureMode::CurrentState, include_time: false },
                known_propensities: known,
                ..NuisanceConfig::default()
            },
            grid: None,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key = value", ln + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_map(map)
    }

    pub fn from_map(mut map: BTreeMap<String, String>) -> Result<Self> {
        fn take<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
            map.remove(key)
                .map(|v| v.parse::<T>().map_err(|_| invalid(format!("bad value '{v}' for {key}"))))
                .transpose()
        }
        let setup_name: String = take(&mut map, "setup")?.ok_or_else(|| invalid("config needs setup = binary|multi"))?;
        let setup = match setup_name.as_str() {
            "binary" => {
                let mut p = BinaryParams::default();
                p.sigma = take(&mut map, "sigma")?.unwrap_or(p.sigma);
                p.beta = take(&mut map, "beta")?.unwrap_or(p.beta);
                p.nu = take(&mut map, "nu")?.unwrap_or(p.nu);
                p.horizon = take(&mut map, "horizon")?.unwrap_or(p.horizon);
                Setup::Binary(p)
            }
            "multi" => {
                let mut p = MultiParams::default();
                p.sigma = take(&mut map, "sigma")?.unwrap_or(p.sigma);
                p.horizon = take(&mut map, "horizon")?.unwrap_or(p.horizon);
                Setup::Multi(p)
            }
            other => return Err(invalid(format!("unknown setup '{other}'"))),
        };
        setup.validate()?;
        let mut cfg = Self::defaults(setup);
        if let Some(v) = map.remove("n") {
            cfg.sample_sizes = parse_list(&v, "n")?;
        }
        if let Some(v) = map.remove("estimators") {
            cfg.estimators = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
        }
        cfg.repetitions = take(&mut map, "repetitions")?.unwrap_or(cfg.repetitions);
        cfg.rollouts = take(&mut map, "rollouts")?.unwrap_or(cfg.rollouts);
        cfg.seed = take(&mut map, "seed")?.unwrap_or(cfg.seed);
        cfg.folds = take(&mut map, "folds")?.unwrap_or(cfg.folds);
        cfg.nuisance.clip = take(&mut map, "clip")?.unwrap_or(cfg.nuisance.clip);
        cfg.nuisance.known_propensities = take(&mut map, "known_propensities")?.unwrap_or(cfg.nuisance.known_propensities);
        if let Some(r) = map.remove("regressor") {
            cfg.nuisance.regressor = parse_regressor(&r, &mut map)?;
        }
        cfg.grid = map.remove("grid").map(PathBuf::from);
        if let Some(k) = map.keys().next() {
            return Err(invalid(format!("unknown config key '{k}'")));
        }
        if cfg.repetitions == 0 || cfg.rollouts == 0 || cfg.sample_sizes.is_empty() || cfg.estimators.is_empty() {
            return Err(invalid("repetitions, rollouts, n and estimators must be non-empty"));
        }
        if cfg.estimators.contains(&Estimator::Aipw) {
            return Err(invalid("aipw is not supported by the benchmark; use evaluate"));
        }
        Ok(cfg)
    }

    /// Canonical `key = value` rendering, used for hashing and logging.
    pub fn render(&self) -> String {
        let mut out = String::new();
        match self.setup {
            Setup::Binary(p) => {
                out += &format!("setup = binary\nsigma = {}\nbeta = {}\nnu = {}\nhorizon = {}\n", p.sigma, p.beta, p.nu, p.horizon)
            }
            Setup::Multi(p) => out += &format!("setup = multi\nsigma = {}\nhorizon = {}\n", p.sigma, p.horizon),
        }
        let ns: Vec<String> = self.sample_sizes.iter().map(ToString::to_string).collect();
        let es: Vec<&str> = self.estimators.iter().map(Estimator::name).collect();
        out += &format!(
            "n = {}\nrepetitions = {}\nestimators = {}\nrollouts = {}\nseed = {}\nfolds = {}\nclip = {}\nknown_propensities = {}\n",
            ns.join(","),
            self.repetitions,
            es.join(","),
            self.rollouts,
            self.seed,
            self.folds,
            self.nuisance.clip,
            self.nuisance.known_propensities
        );
        out += &render_regressor(&self.nuisance.regressor);
        if let Some(g) = &self.grid {
            out += &format!("grid = {}\n", g.display());
        }
        out
    }

    /// The configured grid, made terminal-respecting for the multi setup.
    pub fn policy_grid(&self) -> Result<PolicyGrid> {
        let grid = match (&self.grid, self.setup) {
            (Some(p), _) => PolicyGrid::load(p)?,
            (None, Setup::Binary(_)) => binary_grid(),
            (None, Setup::Multi(_)) => multi_grid(),
        };
        Ok(match self.setup.terminal_sentinel() {
            Some(s) => grid.respecting_terminal(s),
            None => grid,
        })
    }
}

fn parse_list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| invalid(format!("bad value '{s}' in {key}"))))
        .collect()
}

/// Regressor from its name plus optional hyperparameter keys.
pub fn parse_regressor(name: &str, map: &mut BTreeMap<String, String>) -> Result<RegressorSpec> {
    let mut num = |key: &str| -> Result<Option<f64>> {
        map.remove(key)
            .map(|v| v.parse::<f64>().map_err(|_| invalid(format!("bad value '{v}' for {key}"))))
            .transpose()
    };
    Ok(match name {
        "forest" => {
            let mut p = ForestParams::default();
            if let Some(v) = num("trees")? {
                p.num_trees = v as usize;
            }
            if let Some(v) = num("max_depth")? {
                p.max_depth = v as usize;
            }
            if let Some(v) = num("min_leaf")? {
                p.min_leaf = v as usize;
            }
            RegressorSpec::Forest(p)
        }
        "knn" => RegressorSpec::Knn { k: num("k")?.unwrap_or(25.0) as usize },
        "ridge" => RegressorSpec::Ridge { lambda: num("lambda")?.unwrap_or(1e-3), degree: num("degree")?.unwrap_or(3.0) as usize },
        "tabular" => RegressorSpec::Tabular,
        other => return Err(invalid(format!("unknown regressor '{other}'"))),
    })
}

fn render_regressor(r: &RegressorSpec) -> String {
    match r {
        RegressorSpec::Forest(p) => format!(
            "regressor = forest\ntrees = {}\nmax_depth = {}\nmin_leaf = {}\n",
            p.num_trees, p.max_depth, p.min_leaf
        ),
        RegressorSpec::Knn { k } => format!("regressor = knn\nk = {k}\n"),
        RegressorSpec::Ridge { lambda, degree } => format!("regressor = ridge\nlambda = {lambda}\ndegree = {degree}\n"),
        RegressorSpec::Tabular => "regressor = tabular\n".to_string(),
    }
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

/// Outcome of one estimator in one repetition.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub n: usize,
    pub repetition: usize,
    pub method: Estimator,
    /// Oracle value of the learned policy.
    pub value: f64,
    pub regret: f64,
    /// Grid MSE against the oracle; `None` for methods that do not score the grid.
    pub mse: Option<f64>,
    pub failures: usize,
}

/// Aggregated row per sample size and method.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsRow {
    pub n: usize,
    pub method: Estimator,
    pub repetitions: usize,
    pub value: f64,
    pub value_se: f64,
    pub regret: f64,
    pub regret_se: f64,
    pub mse: Option<f64>,
    pub mse_se: Option<f64>,
    /// Repetitions in which the method failed outright.
    pub errors: usize,
}

/// Benchmark output.
#[derive(Clone, Debug)]
pub struct ResultsTable {
    pub setup: Setup,
    /// Largest oracle value over the grid.
    pub oracle_best: f64,
    pub oracle_best_policy: String,
    pub rows: Vec<ResultsRow>,
    pub records: Vec<RunRecord>,
    /// Messages of failed cells.
    pub errors: Vec<String>,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let est = ValueEstimate::from_contributions(v);
    (est.estimate, est.se)
}

impl ResultsTable {
    pub fn row(&self, n: usize, method: Estimator) -> Option<&ResultsRow> {
        self.rows.iter().find(|r| r.n == n && r.method == method)
    }

    /// CSV with a provenance line; `_se` columns are standard errors of the
    /// mean across repetitions.
    pub fn to_csv(&self, prov: &Provenance) -> String {
        let (sigma, beta, nu) = match self.setup {
            Setup::Binary(p) => (p.sigma, Some(p.beta), Some(p.nu)),
            Setup::Multi(p) => (p.sigma, None, None),
        };
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut out = format!("{}\n", prov.header());
        out += "setup,n,nu,beta,sigma,method,repetitions,oracle_best,value,value_se,regret,regret_se,mse,mse_se,errors\n";
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                self.setup.name(),
                r.n,
                opt(nu),
                opt(beta),
                sigma,
                r.method,
                r.repetitions,
                self.oracle_best,
                r.value,
                r.value_se,
                r.regret,
                r.regret_se,
                opt(r.mse),
                opt(r.mse_se),
                r.errors
            );
        }
        out
    }
}

/// Runs the benchmark. Component errors are recorded per cell and do not
/// abort the table.
pub fn run_benchmark(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<ResultsTable> {
    cfg.setup.validate()?;
    let grid = cfg.policy_grid()?;
    let oracle_seed = derive_seed(cfg.seed, &[0x0a]);
    let oracle = oracle_grid(&cfg.setup, &grid, cfg.rollouts, oracle_seed, cache)?;
    let oracle_vals: Vec<f64> = oracle.iter().map(|v| v.estimate).collect();
    let best = argmax_first(&oracle_vals.iter().map(|&v| Some(v)).collect::<Vec<_>>())
        .ok_or_else(|| invalid("oracle values are not finite"))?;
    let oracle_best = oracle_vals[best];
    info!("oracle best {} = {oracle_best}", grid.get(best));

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for &n in &cfg.sample_sizes {
        for rep in 0..cfg.repetitions {
            let seed = derive_seed(cfg.seed, &[n as u64, rep as u64]);
            match run_repetition(cfg, &grid, &oracle_vals, oracle_best, n, rep, seed) {
                Ok((recs, errs)) => {
                    records.extend(recs);
                    errors.extend(errs);
                }
                Err(e) => {
                    warn!("n={n} repetition {rep} failed: {e}");
                    errors.push(format!("n={n} rep={rep}: {e}"));
                }
            }
        }
    }

    let mut rows = Vec::new();
    for &n in &cfg.sample_sizes {
        for &method in &cfg.estimators {
            let recs: Vec<&RunRecord> = records.iter().filter(|r| r.n == n && r.method == method).collect();
            let (value, value_se) = mean_se(&recs.iter().map(|r| r.value).collect::<Vec<_>>());
            let (regret, regret_se) = mean_se(&recs.iter().map(|r| r.regret).collect::<Vec<_>>());
            let mses: Vec<f64> = recs.iter().filter_map(|r| r.mse).collect();
            let (mse, mse_se) = if mses.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_se(&mses);
                (Some(m), Some(s))
            };
            rows.push(ResultsRow {
                n,
                method,
                repetitions: recs.len(),
                value,
                value_se,
                regret,
                regret_se,
                mse,
                mse_se,
                errors: cfg.repetitions - recs.len(),
            });
        }
    }
    Ok(ResultsTable {
        setup: cfg.setup,
        oracle_best,
        oracle_best_policy: grid.get(best).to_string(),
        rows,
        records,
        errors,
    })
}

fn run_repetition(
    cfg: &ExperimentConfig,
    grid: &PolicyGrid,
    oracle: &[f64],
    oracle_best: f64,
    n: usize,
    rep: usize,
    seed: u64,
) -> Result<(Vec<RunRecord>, Vec<String>)> {
    let ds = cfg.setup.simulate(n, seed)?;
    let plan = assign_folds(n, cfg.folds, derive_seed(seed, &[1]))?;
    let ncfg = NuisanceConfig { seed: derive_seed(seed, &[2]), ..cfg.nuisance.clone() };
    let needs_nuisance = cfg.estimators.iter().any(|e| e.scores_grid());
    let set = if needs_nuisance {
        Some(fit_nuisances(&ds, &plan, &ncfg)?)
    } else {
        None
    };
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for &method in &cfg.estimators {
        let rec = match method {
            Estimator::QOpt => run_qopt(cfg, &ds, seed).map(|value| RunRecord {
                n,
                repetition: rep,
                method,
                value,
                regret: oracle_best - value,
                mse: None,
                failures: 0,
            }),
            _ => {
                let set = set.as_ref().expect("nuisances fitted for grid estimators");
                let ctx = EvalContext { ds: &ds, table: Some(set.table()), propensities: set };
                learn_policy(&ctx, grid, method).and_then(|learned| {
                    let pairs: Vec<(f64, f64)> = learned
                        .estimates
                        .iter()
                        .zip(oracle)
                        .filter_map(|(e, o)| e.map(|e| (e.estimate, *o)))
                        .collect();
                    let (est, orc): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                    let mse = mse_vs_oracle(&est, &orc)?;
                    let value = oracle[learned.index];
                    info!("n={n} rep={rep} {method}: learned {} value {value}", learned.policy);
                    Ok(RunRecord {
                        n,
                        repetition: rep,
                        method,
                        value,
                        regret: oracle_best - value,
                        mse: Some(mse),
                        failures: learned.failures.len(),
                    })
                })
            }
        };
        match rec {
            Ok(r) => records.push(r),
            Err(e) => {
                warn!("n={n} rep={rep} {method} failed: {e}");
                errors.push(format!("n={n} rep={rep} {method}: {e}"));
            }
        }
    }
    Ok((records, errors))
}

/// Oracle value of the greedy fitted-Q policy, by rollouts paired with the grid's.
fn run_qopt(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<f64> {
    let q = q_opt(ds, &cfg.nuisance.regressor, &cfg.nuisance.features, derive_seed(seed, &[3]))?;
    let policy = greedy_policy(q)?;
    let v = rollout_deltas(&cfg.setup, std::slice::from_ref(&policy), cfg.rollouts, derive_seed(cfg.seed, &[0x0a]))?;
    Ok(v[0].estimate)
}

/// Sentinel-aware never-treat policy for a setup.
pub fn never_for(setup: &Setup) -> LinearThresholdPolicy {
    match setup {
        Setup::Multi(_) => LinearThresholdPolicy::never().respecting_terminal(DEATH_SENTINEL),
        Setup::Binary(_) => LinearThresholdPolicy::never(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::TruePropensities;
    use crate::sim::TinyDiscreteMDP;

    #[test]
    fn argmax_prefers_first_on_ties_and_skips_missing() {
        assert_eq!(argmax_first(&[Some(1.0), Some(2.0), Some(2.0)]), Some(1));
        assert_eq!(argmax_first(&[None, Some(f64::NAN), Some(-1.0)]), Some(2));
        assert_eq!(argmax_first(&[None, None]), None);
        let shifted: Vec<Option<f64>> = [Some(1.0), Some(2.0), Some(2.0)].iter().map(|v| v.map(|x| x + 10.0)).collect();
        assert_eq!(argmax_first(&shifted), Some(1));
    }

    #[test]
    fn mse_identities() {
        assert_eq!(mse_vs_oracle(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mse_vs_oracle(&[1.5, 2.5], &[1.0, 2.0]).unwrap() - 0.25).abs() < 1e-15);
        assert!(mse_vs_oracle(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::parse("setup = binary\nsigma = 3\nbeta = 1 # comment\nn = 500,2000\nrepetitions = 2\nregressor = knn\nk = 10\n").unwrap();
        assert_eq!(cfg.sample_sizes, vec![500, 2000]);
        assert_eq!(cfg.nuisance.regressor, RegressorSpec::Knn { k: 10 });
        assert_eq!(ExperimentConfig::parse(&cfg.render()).unwrap(), cfg);
        assert!(ExperimentConfig::parse("setup = binary\nbogus = 1").is_err());
        assert!(ExperimentConfig::parse("sigma = 1").is_err());
    }

    #[test]
    fn singleton_grid_is_learned_and_ties_go_first() {
        let mdp = TinyDiscreteMDP::example();
        let ds = mdp.simulate(300, 2).unwrap();
        let table = mdp.nuisance_table(&ds).unwrap();
        let props = TruePropensities(&ds);
        let ctx = EvalContext { ds: &ds, table: Some(&table), propensities: &props };
        let pi = LinearThresholdPolicy::multi([0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let one = PolicyGrid::new(vec![pi.clone()]);
        assert_eq!(learn_policy(&ctx, &one, Estimator::Adr).unwrap().policy, pi);
        // Start thresholds past the horizon never fire, so both estimate exactly 0.
        let a = LinearThresholdPolicy::multi([0.0, 0.0, 1.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        let b = LinearThresholdPolicy::multi([0.0, 0.0, 1.0, 6.0, 0.0, 0.0, 0.0, 1.0]);
        for est in [Estimator::Adr, Estimator::Ipw, Estimator::Wipw] {
            let learned = learn_policy(&ctx, &PolicyGrid::new(vec![b.clone(), a.clone()]), est).unwrap();
            assert_eq!(learned.policy, a);
        }
    }

    #[test]
    fn oracle_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let setup = Setup::Binary(BinaryParams::default());
        let grid = PolicyGrid::new(vec![
            LinearThresholdPolicy::binary(0.0, -1.0, 3.0),
            LinearThresholdPolicy::binary(1.0, 0.0, 0.5),
        ]);
        let a = oracle_grid(&setup, &grid, 50, 1, Some(dir.path())).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let b = oracle_grid(&setup, &grid, 50, 1, Some(dir.path())).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.estimate, y.estimate);
        }
    }

    #[test]
    fn tiny_benchmark_is_deterministic() {
        let text = "setup = binary\nn = 1000\nrepetitions = 1\nrollouts = 100\nestimators = adr,ipw,wipw\nregressor = knn\nk = 15\nfolds = 2\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let a = run_benchmark(&cfg, None).unwrap();
        let b = run_benchmark(&cfg, None).unwrap();
        let prov = Provenance::new(Some(0), &cfg.render());
        assert_eq!(a.to_csv(&prov), b.to_csv(&prov));
        assert_eq!(a.rows.len(), 3);
        for r in &a.rows {
            assert!(r.regret >= -1e-12, "{r:?}");
        }
    }
}
