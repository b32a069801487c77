//! Argument definitions and subcommand bodies.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use adr_core::data::{assign_folds, load_dataset, save_dataset, validate_dataset, Dataset, DatasetSchema, FeatureMode, FeatureSpec};
use adr_core::estimators::{
    adr_advantage, adr_delta_weighted, adr_delta_weighted_terminal, aipw_value, build_scores, build_scores_terminal,
    ipw_value, wipw_value, ValueEstimate,
};
use adr_core::experiments::{
    learn_policy, oracle_csv, oracle_grid, parse_regressor, run_benchmark, write_oracle, EvalContext, Estimator, ExperimentConfig,
    CACHE_ENV,
};
use adr_core::fittedq::{greedy_decisions, greedy_policy, mu_pi_table, q_eval, q_opt};
use adr_core::nuisance::{fit_nuisances, NuisanceConfig, NuisanceSet, PropensitySource, TruePropensities};
use adr_core::policy::{binary_grid, multi_grid, LinearThresholdPolicy, PolicyGrid};
use adr_core::provenance::Provenance;
use adr_core::regress::RegressorSpec;
use adr_core::rng::derive_seed;
use adr_core::sim::{BinaryParams, MultiParams, Setup};
use adr_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "adr", version, about = "Advantage doubly robust learning of when-to-treat policies")]
pub struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate behavior trajectories from a built-in setup.
    Simulate(SimulateArgs),
    /// Report overlap frequencies and structural violations of a dataset.
    Validate(ValidateArgs),
    /// Cross-fit nuisance models and save them to a directory.
    FitNuisance(FitArgs),
    /// Export the per-trajectory score matrix.
    Scores(ScoresArgs),
    /// Estimate the value or advantage of one policy.
    Evaluate(EvaluateArgs),
    /// Learn a policy by grid search, or greedy fitted-Q decisions.
    Learn(LearnArgs),
    /// Oracle advantages over never-treat by Monte Carlo rollouts.
    Oracle(OracleArgs),
    /// Run the simulation benchmark described by a config file.
    Bench(BenchArgs),
    /// Export a policy grid as CSV.
    Grid(GridArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SetupName {
    Binary,
    Multi,
}

#[derive(Debug, Args)]
pub struct SetupArgs {
    #[arg(long, value_enum)]
    setup: SetupName,
    /// Noise scale σ.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Binary setup only; defaults to 0.5.
    #[arg(long)]
    beta: Option<f64>,
    /// Binary setup only; defaults to 0.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
}

impl SetupArgs {
    fn resolve(&self) -> Result<Setup> {
        let setup = match self.setup {
            SetupName::Binary => {
                let d = BinaryParams::default();
                Setup::Binary(BinaryParams {
                    sigma: self.sigma,
                    beta: self.beta.unwrap_or(d.beta),
                    nu: self.nu.unwrap_or(d.nu),
                    horizon: self.horizon,
                })
            }
            SetupName::Multi => {
                if self.beta.is_some() || self.nu.is_some() {
                    return Err(usage("--beta and --nu apply to the binary setup only"));
                }
                Setup::Multi(MultiParams { sigma: self.sigma, horizon: self.horizon })
            }
        };
        setup.validate()?;
        Ok(setup)
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    setup: SetupArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectory CSV; metadata and true propensities go to sidecar files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Frequency below which an overlap cell is flagged.
    #[arg(long, default_value_t = 0.01)]
    overlap_floor: f64,
    /// Overlap table CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Nuisance fitting options shared by several subcommands.
#[derive(Debug, Args)]
pub struct NuisanceArgs {
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// forest, knn, ridge or tabular.
    #[arg(long, default_value = "forest")]
    regressor: String,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    /// Neighbors for knn.
    #[arg(long)]
    k: Option<usize>,
    /// Ridge penalty.
    #[arg(long)]
    lambda: Option<f64>,
    /// Ridge polynomial degree.
    #[arg(long)]
    degree: Option<usize>,
    /// current, last:M or full.
    #[arg(long, default_value = "current")]
    features: String,
    /// Append t to the feature vector.
    #[arg(long)]
    with_time: bool,
    /// Lower clip bound for estimated propensities.
    #[arg(long, default_value_t = 0.01)]
    clip: f64,
    /// Use the simulator-provided behavior probabilities.
    #[arg(long)]
    known_propensities: bool,
}

impl NuisanceArgs {
    fn regressor(&self) -> Result<RegressorSpec> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        };
        put("trees", self.trees.map(|v| v.to_string()));
        put("max_depth", self.max_depth.map(|v| v.to_string()));
        put("min_leaf", self.min_leaf.map(|v| v.to_string()));
        put("k", self.k.map(|v| v.to_string()));
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("degree", self.degree.map(|v| v.to_string()));
        let spec = parse_regressor(&self.regressor, &mut map)?;
        if let Some(k) = map.keys().next() {
            return Err(usage(format!("--{} does not apply to regressor {}", k.replace('_', "-"), self.regressor)));
        }
        Ok(spec)
    }

    fn features(&self) -> Result<FeatureSpec> {
        let mode = match self.features.as_str() {
            "current" => FeatureMode::CurrentState,
            "full" => FeatureMode::FullHistory,
            other => match other.strip_prefix("last:").and_then(|m| m.parse::<usize>().ok()) {
                Some(m) if m >= 1 => FeatureMode::LastStates(m),
                _ => return Err(usage(format!("unknown feature mode '{other}'; use current, last:M or full"))),
            },
        };
        Ok(FeatureSpec { mode, include_time: self.with_time })
    }

    fn config(&self) -> Result<NuisanceConfig> {
        Ok(NuisanceConfig {
            regressor: self.regressor()?,
            features: self.features()?,
            clip: self.clip,
            seed: derive_seed(self.seed, &[2]),
            known_propensities: self.known_propensities,
        })
    }

    fn fit(&self, ds: &Dataset) -> Result<NuisanceSet> {
        let plan = assign_folds(ds.n(), self.folds, derive_seed(self.seed, &[1]))?;
        let cfg = self.config()?;
        info!("fitting nuisances with {} folds", self.folds);
        fit_nuisances(ds, &plan, &cfg)
    }

    /// Saved models from `dir` when given, a fresh fit otherwise.
    fn obtain(&self, ds: &Dataset, dir: Option<&Path>) -> Result<NuisanceSet> {
        match dir {
            Some(d) => NuisanceSet::load(d, ds),
            None => self.fit(ds),
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    /// Directory receiving the manifest and per-fold model files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoresArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory written by fit-nuisance; models are fitted afresh otherwise.
    #[arg(long)]
    nuisance_dir: Option<PathBuf>,
    /// Use the terminal-state score construction.
    #[arg(long)]
    terminal: bool,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// adr, adr-w, adr-term, adr-w-term, ipw, wipw or aipw.
    #[arg(long)]
    estimator: String,
    /// Class tag and parameters, e.g. bin-time:0,-1,3.
    #[arg(long)]
    policy: String,
    #[arg(long)]
    nuisance_dir: Option<PathBuf>,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    /// Result CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[arg(long)]
    data: PathBuf,
    /// A grid estimator, or qopt for greedy fitted-Q decisions.
    #[arg(long)]
    estimator: String,
    /// binary, multi or a grid CSV; chosen from the arm count when omitted.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    nuisance_dir: Option<PathBuf>,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    /// Result CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    setup: SetupArgs,
    /// binary, multi or a grid CSV; the setup's grid when omitted.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 5000)]
    rollouts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long, value_enum)]
    setup: SetupName,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Logs the fully resolved arguments and returns the matching provenance.
fn provenance<T: Debug>(args: &T, seed: Option<u64>) -> Provenance {
    let rendered = format!("{args:?}");
    info!("resolved configuration: {rendered}");
    Provenance::new(seed, &rendered)
}

/// Writes `text` to `out`, or to standard output.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            r => r?,
        },
    }
    Ok(())
}

fn load(path: &Path) -> Result<Dataset> {
    let ds = load_dataset(path, &DatasetSchema::default())?;
    info!("loaded {} trajectories, T={}, K={}, d={}", ds.n(), ds.horizon(), ds.num_arms(), ds.state_dim());
    Ok(ds)
}

/// Policy made terminal-aware when the dataset has an absorbing state.
fn fit_to_data(pi: LinearThresholdPolicy, ds: &Dataset) -> LinearThresholdPolicy {
    match ds.terminal() {
        Some(spec) => pi.respecting_terminal(spec.sentinel),
        None => pi,
    }
}

fn resolve_grid(name: Option<&str>, num_arms: usize, ds: Option<&Dataset>) -> Result<PolicyGrid> {
    let grid = match name {
        Some("binary") => binary_grid(),
        Some("multi") => multi_grid(),
        Some(path) => PolicyGrid::load(Path::new(path))?,
        None if num_arms == 1 => binary_grid(),
        None => multi_grid(),
    };
    Ok(match ds.and_then(Dataset::terminal) {
        Some(spec) => grid.respecting_terminal(spec.sentinel),
        None => grid,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot size the worker pool: {e}")))?;
    }
    info!("worker threads: {}", rayon::current_num_threads());
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Validate(a) => validate(&a),
        Command::FitNuisance(a) => fit_nuisance(&a),
        Command::Scores(a) => scores(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Learn(a) => learn(&a),
        Command::Oracle(a) => oracle(&a),
        Command::Bench(a) => bench(&a),
        Command::Grid(a) => grid(&a),
    }
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let setup = a.setup.resolve()?;
    let prov = provenance(&(a, setup), Some(a.seed));
    let ds = setup.simulate(a.n, a.seed)?;
    save_dataset(&ds, &a.out, &prov)?;
    info!("wrote {} {} trajectories to {}", ds.n(), setup.name(), a.out.display());
    Ok(())
}

fn validate(a: &ValidateArgs) -> Result<()> {
    let prov = provenance(a, None);
    let ds = load(&a.data)?;
    let report = validate_dataset(&ds, a.overlap_floor);
    let mut out = format!("{}\nt,action,count,at_risk,frequency,flagged\n", prov.header());
    for c in &report.cells {
        out += &format!("{},{},{},{},{},{}\n", c.t, c.action, c.count, c.at_risk, c.frequency, u8::from(c.frequency < a.overlap_floor));
    }
    emit(a.out.as_deref(), &out)?;
    for c in report.overlap_flags() {
        warn!("overlap below {} at t={}, action {}: frequency {}", a.overlap_floor, c.t, c.action, c.frequency);
    }
    for v in &report.violations {
        warn!("violation: {v:?}");
    }
    if !report.violations.is_empty() {
        return Err(Error::Data(format!("{} structural violations", report.violations.len())));
    }
    Ok(())
}

fn fit_nuisance(a: &FitArgs) -> Result<()> {
    let prov = provenance(a, Some(a.nuisance.seed));
    let ds = load(&a.data)?;
    let set = a.nuisance.fit(&ds)?;
    set.save(&a.out)?;
    fs::write(a.out.join("provenance.txt"), format!("{}\n", prov.header()))?;
    info!("saved nuisance models to {}", a.out.display());
    Ok(())
}

fn scores(a: &ScoresArgs) -> Result<()> {
    let prov = provenance(a, Some(a.nuisance.seed));
    let ds = load(&a.data)?;
    let set = a.nuisance.obtain(&ds, a.nuisance_dir.as_deref())?;
    let sm = if a.terminal {
        build_scores_terminal(&ds, set.table())?
    } else {
        build_scores(&ds, set.table())?
    };
    sm.save(&a.out, &prov)?;
    info!("wrote {}x{} score matrix to {}", sm.n(), sm.width(), a.out.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let est: Estimator = a.estimator.parse()?;
    if est == Estimator::QOpt {
        return Err(usage("qopt is a learner; use the learn subcommand"));
    }
    let prov = provenance(a, Some(a.nuisance.seed));
    let ds = load(&a.data)?;
    let pi = fit_to_data(a.policy.parse()?, &ds);
    let truth = TruePropensities(&ds);
    let needs_models = !matches!(est, Estimator::Ipw | Estimator::Wipw | Estimator::Aipw) || !a.nuisance.known_propensities;
    let set = if needs_models {
        Some(a.nuisance.obtain(&ds, a.nuisance_dir.as_deref())?)
    } else {
        None
    };
    let props: &dyn PropensitySource = match &set {
        Some(s) if !a.nuisance.known_propensities => s,
        _ => &truth,
    };
    let (estimand, v): (&str, ValueEstimate) = match est {
        Estimator::Adr | Estimator::AdrTerminal => {
            let table = set.as_ref().expect("models fitted").table();
            let sm = if est == Estimator::Adr {
                build_scores(&ds, table)?
            } else {
                build_scores_terminal(&ds, table)?
            };
            ("advantage", adr_advantage(&sm, &ds, &pi)?)
        }
        Estimator::AdrWeighted => ("advantage", adr_delta_weighted(&ds, set.as_ref().expect("models fitted").table(), &pi)?),
        Estimator::AdrWeightedTerminal => {
            ("advantage", adr_delta_weighted_terminal(&ds, set.as_ref().expect("models fitted").table(), &pi)?)
        }
        Estimator::Ipw => ("value", ipw_value(&ds, &pi, props)?),
        Estimator::Wipw => ("value", wipw_value(&ds, &pi, props)?),
        Estimator::Aipw => {
            let (q, _) = q_eval(&ds, &pi, &a.nuisance.regressor()?, &a.nuisance.features()?, derive_seed(a.nuisance.seed, &[3]))?;
            let mu = mu_pi_table(&q, &ds, &pi);
            ("value", aipw_value(&ds, &pi, props, &mu)?)
        }
        Estimator::QOpt => unreachable!(),
    };
    info!("{est} {estimand} of {pi}: {} (se {})", v.estimate, v.se);
    let out = format!(
        "{}\npolicy,estimator,estimand,estimate,se,n\n\"{pi}\",{est},{estimand},{},{},{}\n",
        prov.header(),
        v.estimate,
        v.se,
        v.n
    );
    emit(a.out.as_deref(), &out)
}

fn learn(a: &LearnArgs) -> Result<()> {
    let est: Estimator = a.estimator.parse()?;
    let prov = provenance(a, Some(a.nuisance.seed));
    let ds = load(&a.data)?;
    if est == Estimator::QOpt {
        let q = q_opt(&ds, &a.nuisance.regressor()?, &a.nuisance.features()?, derive_seed(a.nuisance.seed, &[3]))?;
        let greedy = greedy_policy(q)?;
        let decisions = greedy_decisions(&greedy, &ds)?;
        let k = ds.num_arms();
        let qcols: Vec<String> = (0..=k).map(|a| format!("q_{a}")).collect();
        let mut out = format!("{}\ntraj_id,t,action,{}\n", prov.header(), qcols.join(","));
        for (i, t, action) in decisions {
            let h = ds.trajectory(i).history(t);
            let qs: Vec<String> = (0..=k)
                .map(|a| greedy.models().q(h, a).map_or_else(String::new, |v| v.to_string()))
                .collect();
            out += &format!("{i},{t},{action},{}\n", qs.join(","));
        }
        return emit(a.out.as_deref(), &out);
    }
    if !est.scores_grid() {
        return Err(usage(format!("estimator {est} cannot drive a grid search")));
    }
    let grid = resolve_grid(a.grid.as_deref(), ds.num_arms(), Some(&ds))?;
    let set = a.nuisance.obtain(&ds, a.nuisance_dir.as_deref())?;
    let truth = TruePropensities(&ds);
    let props: &dyn PropensitySource = if a.nuisance.known_propensities { &truth } else { &set };
    let ctx = EvalContext { ds: &ds, table: Some(set.table()), propensities: props };
    let learned = learn_policy(&ctx, &grid, est)?;
    info!("{est} selected {} ({} of {} policies failed)", learned.policy, learned.failures.len(), grid.len());
    let mut out = format!("{}\nindex,policy,estimate,se,selected\n", prov.header());
    for (i, (pi, e)) in grid.policies().iter().zip(&learned.estimates).enumerate() {
        let (v, se) = e.map_or((String::new(), String::new()), |e| (e.estimate.to_string(), e.se.to_string()));
        out += &format!("{i},\"{pi}\",{v},{se},{}\n", u8::from(i == learned.index));
    }
    emit(a.out.as_deref(), &out)
}

fn oracle(a: &OracleArgs) -> Result<()> {
    let setup = a.setup.resolve()?;
    if a.rollouts == 0 {
        return Err(usage("--rollouts must be at least 1"));
    }
    let prov = provenance(&(a, setup), Some(a.seed));
    let num_arms = match setup {
        Setup::Binary(_) => 1,
        Setup::Multi(_) => 2,
    };
    let mut grid = resolve_grid(a.grid.as_deref(), num_arms, None)?;
    if let Some(s) = setup.terminal_sentinel() {
        grid = grid.respecting_terminal(s);
    }
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let values = oracle_grid(&setup, &grid, a.rollouts, a.seed, cache.as_deref())?;
    let labels: Vec<String> = grid.policies().iter().map(ToString::to_string).collect();
    match &a.out {
        Some(p) => write_oracle(p, &prov, &labels, &values),
        None => emit(None, &oracle_csv(&prov, &labels, &values)),
    }
}

fn bench(a: &BenchArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)?;
    let cfg = ExperimentConfig::parse(&text)?;
    let rendered = cfg.render();
    info!("resolved configuration:\n{rendered}");
    let prov = Provenance::new(Some(cfg.seed), &rendered);
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let table = run_benchmark(&cfg, cache.as_deref())?;
    for e in &table.errors {
        warn!("{e}");
    }
    info!("oracle best {} = {}", table.oracle_best_policy, table.oracle_best);
    fs::write(&a.out, table.to_csv(&prov))?;
    info!("wrote {} rows to {}", table.rows.len(), a.out.display());
    Ok(())
}

fn grid(a: &GridArgs) -> Result<()> {
    let prov = provenance(a, None);
    let grid = match a.setup {
        SetupName::Binary => binary_grid(),
        SetupName::Multi => multi_grid(),
    };
    match &a.out {
        Some(p) => grid.save(p, &prov),
        None => {
            let mut buf = Vec::new();
            grid.write(&mut buf, &prov)?;
            emit(None, &String::from_utf8_lossy(&buf))
        }
    }
}
