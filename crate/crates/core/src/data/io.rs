//! Trajectory CSV plus `key=value` sidecar metadata.
//!
//! Layout of `<path>`:
//!
//! ```text
//! # adr 0.1.0 seed=7 config=...
//! traj_id,t,s_1,...,s_d,action,y,is_terminal
//! ```
//!
//! `y` is filled on the final row of each trajectory only. The sidecar
//! `<path>.meta` records `horizon`, `num_arms`, `state_dim`, the terminal
//! sentinel and the staggered flag. When the dataset carries behavior
//! probabilities they are written to `<path>.propensities.csv`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Dataset, TerminalOutcome, TerminalSpec, Trajectory};
use crate::error::{Error, Result};
use crate::provenance::Provenance;

/// Expected shape of a dataset file; unset fields are inferred.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatasetSchema {
    pub horizon: Option<usize>,
    pub num_arms: Option<usize>,
    pub state_dim: Option<usize>,
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub(crate) fn propensity_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".propensities.csv");
    PathBuf::from(s)
}

/// Writes the trajectory CSV, its sidecar and (if present) the propensity table.
pub fn save_dataset(ds: &Dataset, path: &Path, prov: &Provenance) -> Result<()> {
    let d = ds.state_dim();
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", prov.header())?;
    let states: Vec<String> = (1..=d).map(|j| format!("s_{j}")).collect();
    writeln!(w, "traj_id,t,{},action,y,is_terminal", states.join(","))?;
    for (i, tr) in ds.trajectories().iter().enumerate() {
        for t in 1..=ds.horizon() {
            write!(w, "{i},{t}")?;
            for v in tr.state(t) {
                write!(w, ",{v}")?;
            }
            write!(w, ",{},", tr.action(t))?;
            if t == ds.horizon() {
                write!(w, "{}", tr.outcome())?;
            }
            writeln!(w, ",{}", u8::from(tr.is_terminal_at(t)))?;
        }
    }
    w.flush()?;

    let mut m = BufWriter::new(fs::File::create(sidecar_path(path))?);
    writeln!(m, "{}", prov.header())?;
    writeln!(m, "horizon={}", ds.horizon())?;
    writeln!(m, "num_arms={}", ds.num_arms())?;
    writeln!(m, "state_dim={d}")?;
    writeln!(m, "staggered={}", ds.staggered())?;
    if let Some(spec) = ds.terminal() {
        writeln!(m, "terminal_sentinel={}", spec.sentinel)?;
        match spec.outcome {
            TerminalOutcome::SurvivalTime => writeln!(m, "terminal_outcome=survival_time")?,
        }
    }
    if let Some(table) = ds.true_propensity_table() {
        let ppath = propensity_path(path);
        let name = ppath.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        writeln!(m, "propensities={name}")?;
        let mut p = BufWriter::new(fs::File::create(&ppath)?);
        writeln!(p, "{}", prov.header())?;
        let cols: Vec<String> = (0..=ds.num_arms()).map(|a| format!("p_{a}")).collect();
        writeln!(p, "traj_id,t,{}", cols.join(","))?;
        let width = ds.num_arms() + 1;
        for (row, chunk) in table.chunks(width).enumerate() {
            write!(p, "{},{}", row / ds.horizon(), row % ds.horizon() + 1)?;
            for v in chunk {
                write!(p, ",{v}")?;
            }
            writeln!(p)?;
        }
        p.flush()?;
    }
    m.flush()?;
    Ok(())
}

#[derive(Default)]
struct Sidecar {
    horizon: Option<usize>,
    num_arms: Option<usize>,
    state_dim: Option<usize>,
    staggered: bool,
    sentinel: Option<f64>,
    propensities: Option<String>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn read_sidecar(path: &Path) -> Result<Option<Sidecar>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut out = Sidecar::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, lineno + 1, "expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| parse_err(path, lineno + 1, format!("bad integer for {key}: '{v}'")))
        };
        match key {
            "horizon" => out.horizon = Some(num(value)?),
            "num_arms" => out.num_arms = Some(num(value)?),
            "state_dim" => out.state_dim = Some(num(value)?),
            "staggered" => {
                out.staggered = value
                    .parse()
                    .map_err(|_| parse_err(path, lineno + 1, format!("bad boolean '{value}'")))?
            }
            "terminal_sentinel" => {
                out.sentinel = Some(value.parse().map_err(|_| {
                    parse_err(path, lineno + 1, format!("bad sentinel '{value}'"))
                })?)
            }
            "terminal_outcome" => {
                if value != "survival_time" {
                    return Err(parse_err(path, lineno + 1, format!("unknown terminal outcome '{value}'")));
                }
            }
            "propensities" => out.propensities = Some(value.to_string()),
            other => return Err(parse_err(path, lineno + 1, format!("unknown key '{other}'"))),
        }
    }
    Ok(Some(out))
}

fn check_schema(what: &str, found: usize, expected: Option<usize>) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(Error::Data(format!("{what} is {found} but schema expects {e}"))),
        _ => Ok(()),
    }
}

struct RawTrajectory {
    states: Vec<f64>,
    actions: Vec<usize>,
    outcome: Option<f64>,
    terminal_entry: Option<usize>,
    first_line: usize,
}

/// Reads a trajectory CSV and its optional sidecar, validating against `schema`.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    let sidecar = read_sidecar(&sidecar_path(path))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let header_line = 1;
    if names.len() < 5 || names[0] != "traj_id" || names[1] != "t" {
        return Err(parse_err(path, header_line, "header must start with traj_id,t"));
    }
    let d = names[2..].iter().take_while(|c| c.starts_with("s_")).count();
    if d == 0 {
        return Err(parse_err(path, header_line, "no state columns s_1..s_d"));
    }
    let rest = &names[2 + d..];
    let has_terminal = match rest {
        ["action", "y"] => false,
        ["action", "y", "is_terminal"] => true,
        _ => return Err(parse_err(path, header_line, "expected columns action,y[,is_terminal] after states")),
    };

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, RawTrajectory> = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != names.len() {
            return Err(parse_err(path, line, format!("expected {} fields, got {}", names.len(), rec.len())));
        }
        let field = |j: usize| rec.get(j).unwrap_or("").trim();
        let id = field(0).to_string();
        let t: usize = field(1)
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad time index '{}'", field(1))))?;
        let raw = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawTrajectory {
                states: Vec::new(),
                actions: Vec::new(),
                outcome: None,
                terminal_entry: None,
                first_line: line,
            }
        });
        if t != raw.actions.len() + 1 {
            return Err(parse_err(path, line, format!("trajectory '{id}': expected t={}, got t={t}", raw.actions.len() + 1)));
        }
        if raw.outcome.is_some() {
            return Err(parse_err(path, line, format!("trajectory '{id}': rows after the outcome row")));
        }
        for j in 0..d {
            let v: f64 = field(2 + j)
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad state value '{}'", field(2 + j))))?;
            raw.states.push(v);
        }
        let action: usize = field(2 + d)
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad action '{}'", field(2 + d))))?;
        raw.actions.push(action);
        let y = field(3 + d);
        if !y.is_empty() {
            raw.outcome = Some(y.parse().map_err(|_| parse_err(path, line, format!("bad outcome '{y}'")))?);
        }
        if has_terminal {
            match field(4 + d) {
                "0" | "" => {
                    if raw.terminal_entry.is_some() {
                        return Err(parse_err(path, line, format!("trajectory '{id}': terminal state is not absorbing")));
                    }
                }
                "1" => {
                    raw.terminal_entry.get_or_insert(t);
                }
                other => return Err(parse_err(path, line, format!("bad is_terminal flag '{other}'"))),
            }
        }
    }
    if order.is_empty() {
        return Err(Error::Data(format!("{}: no trajectory rows", path.display())));
    }

    let side = sidecar.unwrap_or_default();
    let horizon = by_id[&order[0]].actions.len();
    check_schema("horizon", horizon, schema.horizon)?;
    check_schema("horizon", horizon, side.horizon)?;
    check_schema("state dimension", d, schema.state_dim)?;
    check_schema("state dimension", d, side.state_dim)?;
    let max_action = by_id.values().flat_map(|r| r.actions.iter().copied()).max().unwrap_or(0);
    let num_arms = match (side.num_arms, schema.num_arms) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Data(format!("num_arms is {a} in metadata but schema expects {b}")))
        }
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => max_action.max(1),
    };
    let terminal = side.sentinel.map(TerminalSpec::survival);

    let mut trajectories = Vec::with_capacity(order.len());
    for id in &order {
        let raw = by_id.remove(id).expect("id recorded on first sight");
        let y = raw.outcome.ok_or_else(|| {
            parse_err(path, raw.first_line, format!("trajectory '{id}': missing outcome y on its final row"))
        })?;
        if raw.actions.len() != horizon {
            return Err(Error::Data(format!(
                "inconsistent horizon: trajectory '{id}' has T={} but the first trajectory has T={horizon}",
                raw.actions.len()
            )));
        }
        if raw.terminal_entry.is_some() && terminal.is_none() {
            return Err(Error::Data(format!("trajectory '{id}' is terminal but no terminal_sentinel is recorded")));
        }
        trajectories.push(Trajectory::from_flat(raw.states, d, raw.actions, y, raw.terminal_entry)?);
    }
    let mut ds = Dataset::new(trajectories, num_arms, terminal, side.staggered)?;
    if let Some(name) = side.propensities {
        let ppath = path.parent().unwrap_or(Path::new(".")).join(name);
        let table = load_propensities(&ppath, ds.n(), horizon, num_arms)?;
        ds = ds.with_true_propensities(table)?;
    }
    Ok(ds)
}

fn load_propensities(path: &Path, n: usize, horizon: usize, num_arms: usize) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let width = num_arms + 1;
    let mut table = Vec::with_capacity(n * horizon * width);
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width + 2 {
            return Err(parse_err(path, line, format!("expected {} fields", width + 2)));
        }
        let t: usize = rec[1].parse().map_err(|_| parse_err(path, line, "bad time index"))?;
        if t != row % horizon + 1 {
            return Err(parse_err(path, line, "propensity rows out of order"));
        }
        for j in 0..width {
            table.push(rec[2 + j].parse().map_err(|_| parse_err(path, line, "bad probability"))?);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "traj_id,t,s_1,action,y,is_terminal\na,1,0.5,0,,0\na,2,0.7,1,3.5,0\n");
        let ds = load_dataset(&p, &DatasetSchema::default()).unwrap();
        assert_eq!((ds.n(), ds.horizon(), ds.state_dim(), ds.num_arms()), (1, 2, 1, 1));
        assert_eq!(ds.trajectory(0).outcome(), 3.5);
        assert_eq!(ds.trajectory(0).state(2), &[0.7]);
    }

    #[test]
    fn action_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "traj_id,t,s_1,action,y,is_terminal\na,1,0.5,5,,0\na,2,0.7,5,3.5,0\n");
        let schema = DatasetSchema { num_arms: Some(2), ..Default::default() };
        let err = load_dataset(&p, &schema).unwrap_err();
        assert!(err.to_string().contains("action out of range"), "{err}");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "traj_id,t,s_1,action,y\na,1,zz,0,\n");
        match load_dataset(&p, &DatasetSchema::default()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn inconsistent_horizon_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "traj_id,t,s_1,action,y\na,1,0,0,\na,2,0,0,1\nb,1,0,0,2\n");
        let err = load_dataset(&p, &DatasetSchema::default()).unwrap_err();
        assert!(err.to_string().contains("inconsistent horizon"), "{err}");
    }

    #[test]
    fn non_absorbing_terminal_flag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "d.csv.meta", "horizon=3\nnum_arms=1\nstate_dim=1\nterminal_sentinel=-1\n");
        let p = write(dir.path(), "d.csv", "traj_id,t,s_1,action,y,is_terminal\na,1,0,0,,0\na,2,-1,0,,1\na,3,0,0,1,0\n");
        assert!(load_dataset(&p, &DatasetSchema::default()).is_err());
    }

    #[test]
    fn round_trip_preserves_terminal_and_propensities() {
        let spec = TerminalSpec::survival(-1.0);
        let a = Trajectory::new(vec![vec![0.25, 1.0], vec![-1.0, -1.0]], vec![2, 0], 1.0, Some(2)).unwrap();
        let b = Trajectory::new(vec![vec![0.1, 0.2], vec![1e-17, 3.0]], vec![0, 1], -0.3, None).unwrap();
        let ds = Dataset::new(vec![a, b], 2, Some(spec), true)
            .unwrap()
            .with_true_propensities(vec![0.5, 0.25, 0.25, 1.0, 0.0, 0.0, 0.2, 0.4, 0.4, 0.1, 0.45, 0.45])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.csv");
        save_dataset(&ds, &p, &Provenance::new(Some(1), "x")).unwrap();
        let back = load_dataset(&p, &DatasetSchema::default()).unwrap();
        assert_eq!(back, ds);
    }
}
