//! Python bindings: simulate, load, fit nuisances, evaluate and learn policies.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use adr_core::data::{assign_folds, load_dataset, save_dataset, DatasetSchema};
use adr_core::estimators::{
    adr_advantage, adr_delta_weighted, adr_delta_weighted_terminal, build_scores, build_scores_terminal, ipw_value,
    wipw_value, ValueEstimate,
};
use adr_core::experiments::{learn_policy, EvalContext, Estimator};
use adr_core::nuisance::{fit_nuisances, NuisanceConfig, NuisanceSet, PropensitySource, TruePropensities};
use adr_core::policy::{binary_grid, multi_grid, LinearThresholdPolicy, PolicyGrid};
use adr_core::provenance::Provenance;
use adr_core::rng::derive_seed;
use adr_core::sim::{rollout_deltas, BinaryParams, MultiParams, Setup};
use adr_core::{Error, ErrorKind};

create_exception!(adr_py, AdrError, PyException);
create_exception!(adr_py, DataError, AdrError);
create_exception!(adr_py, NumericError, AdrError);

fn py_err(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Usage => PyValueError::new_err(e.to_string()),
        ErrorKind::Data => DataError::new_err(e.to_string()),
        ErrorKind::Numeric => NumericError::new_err(e.to_string()),
    }
}

fn setup_from(name: &str, sigma: f64, beta: f64, nu: f64, horizon: usize) -> PyResult<Setup> {
    let setup = match name {
        "binary" => Setup::Binary(BinaryParams { sigma, beta, nu, horizon }),
        "multi" => Setup::Multi(MultiParams { sigma, horizon }),
        other => return Err(PyValueError::new_err(format!("unknown setup '{other}'"))),
    };
    setup.validate().map_err(py_err)?;
    Ok(setup)
}

fn parse_policy(text: &str, ds: &adr_core::data::Dataset) -> PyResult<LinearThresholdPolicy> {
    let pi: LinearThresholdPolicy = text.parse().map_err(py_err)?;
    Ok(match ds.terminal() {
        Some(spec) => pi.respecting_terminal(spec.sentinel),
        None => pi,
    })
}

/// Trajectory dataset.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: adr_core::data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn num_arms(&self) -> usize {
        self.inner.num_arms()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn outcomes(&self) -> Vec<f64> {
        self.inner.trajectories().iter().map(|t| t.outcome()).collect()
    }

    fn actions(&self) -> Vec<Vec<usize>> {
        self.inner.trajectories().iter().map(|t| t.actions().to_vec()).collect()
    }

    /// States of trajectory `i` as `T` rows of length `d`.
    fn states(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        if i >= self.inner.n() {
            return Err(PyValueError::new_err(format!("trajectory {i} out of range")));
        }
        let d = self.inner.state_dim();
        Ok(self.inner.trajectory(i).states_flat().chunks(d).map(<[f64]>::to_vec).collect())
    }

    #[pyo3(signature = (path, seed=None))]
    fn save(&self, path: PathBuf, seed: Option<u64>) -> PyResult<()> {
        let prov = Provenance::new(seed, &format!("python save n={}", self.inner.n()));
        save_dataset(&self.inner, &path, &prov).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, horizon={}, num_arms={}, state_dim={})",
            self.inner.n(),
            self.inner.horizon(),
            self.inner.num_arms(),
            self.inner.state_dim()
        )
    }
}

/// Cross-fitted nuisance models bound to the dataset they were fitted on.
#[pyclass(name = "Nuisances", frozen)]
struct PyNuisances {
    inner: NuisanceSet,
    known_propensities: bool,
}

#[pymethods]
impl PyNuisances {
    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }
}

/// Simulates behavior trajectories from the binary or multi setup.
#[pyfunction]
#[pyo3(signature = (setup, n, seed=0, sigma=1.0, beta=0.5, nu=0.0, horizon=10))]
fn simulate(setup: &str, n: usize, seed: u64, sigma: f64, beta: f64, nu: f64, horizon: usize) -> PyResult<PyDataset> {
    let s = setup_from(setup, sigma, beta, nu, horizon)?;
    Ok(PyDataset { inner: s.simulate(n, seed).map_err(py_err)? })
}

/// Reads a trajectory CSV and its sidecars.
#[pyfunction]
fn load(path: PathBuf) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: load_dataset(&path, &DatasetSchema::default()).map_err(py_err)? })
}

/// Cross-fits propensities and outcome regressions with the default forest.
#[pyfunction]
#[pyo3(signature = (ds, folds=5, seed=0, known_propensities=false))]
fn fit(ds: &PyDataset, folds: usize, seed: u64, known_propensities: bool) -> PyResult<PyNuisances> {
    let plan = assign_folds(ds.inner.n(), folds, derive_seed(seed, &[1])).map_err(py_err)?;
    let cfg = NuisanceConfig { seed: derive_seed(seed, &[2]), known_propensities, ..NuisanceConfig::default() };
    let inner = fit_nuisances(&ds.inner, &plan, &cfg).map_err(py_err)?;
    Ok(PyNuisances { inner, known_propensities })
}

/// `(estimate, se)` of one policy: the advantage over never-treat for the ADR
/// variants, the value for ipw and wipw.
#[pyfunction]
#[pyo3(signature = (ds, policy, estimator, nuisances=None))]
fn evaluate(ds: &PyDataset, policy: &str, estimator: &str, nuisances: Option<&PyNuisances>) -> PyResult<(f64, f64)> {
    let est: Estimator = estimator.parse().map_err(py_err)?;
    let pi = parse_policy(policy, &ds.inner)?;
    let need = || nuisances.ok_or_else(|| PyValueError::new_err(format!("{est} needs fitted nuisances")));
    let truth = TruePropensities(&ds.inner);
    let props: &dyn PropensitySource = match nuisances {
        Some(n) if !n.known_propensities => &n.inner,
        _ => &truth,
    };
    let v: ValueEstimate = match est {
        Estimator::Adr => adr_advantage(&build_scores(&ds.inner, need()?.inner.table()).map_err(py_err)?, &ds.inner, &pi),
        Estimator::AdrTerminal => {
            adr_advantage(&build_scores_terminal(&ds.inner, need()?.inner.table()).map_err(py_err)?, &ds.inner, &pi)
        }
        Estimator::AdrWeighted => adr_delta_weighted(&ds.inner, need()?.inner.table(), &pi),
        Estimator::AdrWeightedTerminal => adr_delta_weighted_terminal(&ds.inner, need()?.inner.table(), &pi),
        Estimator::Ipw => ipw_value(&ds.inner, &pi, props),
        Estimator::Wipw => wipw_value(&ds.inner, &pi, props),
        Estimator::Aipw | Estimator::QOpt => {
            return Err(PyValueError::new_err(format!("{est} is available from the command line only")))
        }
    }
    .map_err(py_err)?;
    Ok((v.estimate, v.se))
}

/// Grid search; returns the selected policy and per-policy estimates (`None` where evaluation failed).
#[pyfunction]
#[pyo3(signature = (ds, estimator, nuisances, grid=None))]
fn learn(ds: &PyDataset, estimator: &str, nuisances: &PyNuisances, grid: Option<&str>) -> PyResult<(String, Vec<Option<f64>>)> {
    let est: Estimator = estimator.parse().map_err(py_err)?;
    let mut g = match grid {
        Some("binary") => binary_grid(),
        Some("multi") => multi_grid(),
        Some(path) => PolicyGrid::load(std::path::Path::new(path)).map_err(py_err)?,
        None if ds.inner.num_arms() == 1 => binary_grid(),
        None => multi_grid(),
    };
    if let Some(spec) = ds.inner.terminal() {
        g = g.respecting_terminal(spec.sentinel);
    }
    let truth = TruePropensities(&ds.inner);
    let props: &dyn PropensitySource = if nuisances.known_propensities { &truth } else { &nuisances.inner };
    let ctx = EvalContext { ds: &ds.inner, table: Some(nuisances.inner.table()), propensities: props };
    let learned = learn_policy(&ctx, &g, est).map_err(py_err)?;
    Ok((learned.policy.to_string(), learned.estimates.iter().map(|e| e.map(|v| v.estimate)).collect()))
}

/// Oracle `(advantage, se)` over never-treat for each policy by paired rollouts.
#[pyfunction]
#[pyo3(signature = (setup, policies, rollouts=5000, seed=0, sigma=1.0, beta=0.5, nu=0.0, horizon=10))]
#[allow(clippy::too_many_arguments)]
fn oracle(
    setup: &str,
    policies: Vec<String>,
    rollouts: usize,
    seed: u64,
    sigma: f64,
    beta: f64,
    nu: f64,
    horizon: usize,
) -> PyResult<Vec<(f64, f64)>> {
    let s = setup_from(setup, sigma, beta, nu, horizon)?;
    let pis = policies
        .iter()
        .map(|p| {
            let pi: LinearThresholdPolicy = p.parse().map_err(py_err)?;
            Ok(match s.terminal_sentinel() {
                Some(v) => pi.respecting_terminal(v),
                None => pi,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let vals = rollout_deltas(&s, &pis, rollouts, seed).map_err(py_err)?;
    Ok(vals.iter().map(|v| (v.estimate, v.se)).collect())
}

/// Labels of a built-in policy grid.
#[pyfunction]
fn grid(setup: &str) -> PyResult<Vec<String>> {
    let g = match setup {
        "binary" => binary_grid(),
        "multi" => multi_grid(),
        other => return Err(PyValueError::new_err(format!("unknown setup '{other}'"))),
    };
    Ok(g.policies().iter().map(ToString::to_string).collect())
}

#[pymodule]
fn adr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNuisances>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(load, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(learn, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(grid, m)?)?;
    m.add("AdrError", m.py().get_type::<AdrError>())?;
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
