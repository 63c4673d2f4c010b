//! Experiment runner: strict TOML configs, replica orchestration and
//! checksummed artifacts.
//!
//! A config names an experiment, a seed and a `[params]` table:
//!
//! ```toml
//! experiment = "flow_pm"
//! seed = 7
//! [params]
//! x0 = [-0.5, 0.5]
//! ```
//!
//! Every default is written out in the normalized echo, and feeding the
//! echo back through [`validate`] gives the same config.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chaos::{chaos_sum, heat_apply, ChaosNoise, FunctionGrid};
use crate::flow_plus::{estimate_kernel_plus, kernel_apply, plus_labels, simulate_n_point_plus, stays_positive, PlusMode};
use crate::flow_pm::{flow_property_check, one_point_terminal_pm, simulate_n_point_pm};
use crate::noise::{coarsen, derive_seed, make_grid, sample_bundle, Label, Substream, TimeGrid};
use crate::verify::{exit_probability_check, ks_test, mc_summary, normal_cdf, path_residual, test_function_library, TestReport};
use crate::wedge::{laplace_compare, laplace_identity_samples, run_two_point, TwoPointConfig};
use crate::CovarianceKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    FlowPm,
    FlowPlusKernel,
    FlowPlusCoalescing,
    WedgeLaplace,
    ChaosCompare,
    VerifySuite,
}

const EXPERIMENTS: [(&str, Experiment); 6] = [
    ("flow_pm", Experiment::FlowPm),
    ("flow_plus_kernel", Experiment::FlowPlusKernel),
    ("flow_plus_coalescing", Experiment::FlowPlusCoalescing),
    ("wedge_laplace", Experiment::WedgeLaplace),
    ("chaos_compare", Experiment::ChaosCompare),
    ("verify_suite", Experiment::VerifySuite),
];

const TOP_KEYS: [&str; 4] = ["experiment", "seed", "output_dir", "params"];
const ALL_PARAMS: [&str; 10] = ["x0", "horizon", "dt", "replicas", "M", "n_max", "alpha", "eps", "coarsen", "nodes"];

impl Experiment {
    pub fn name(self) -> &'static str {
        EXPERIMENTS.iter().find(|e| e.1 == self).map(|e| e.0).unwrap_or_default()
    }

    fn params(self) -> &'static [&'static str] {
        match self {
            Self::FlowPm | Self::FlowPlusCoalescing => &["x0", "horizon", "dt", "replicas"],
            Self::FlowPlusKernel => &["x0", "horizon", "dt", "replicas", "M"],
            Self::WedgeLaplace => &["x0", "horizon", "dt", "replicas", "alpha", "eps"],
            Self::ChaosCompare => &["x0", "horizon", "dt", "replicas", "M", "n_max", "coarsen", "nodes"],
            Self::VerifySuite => &["horizon", "dt", "replicas", "alpha", "eps"],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[serde(rename = "M", skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarsen: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unknown key `{key}` in {scope}{}", hint(.suggestion))]
    UnknownKey { key: String, scope: String, suggestion: Option<String> },
    #[error("missing required field `{0}`")]
    Missing(String),
    #[error("field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn hint(s: &Option<String>) -> String {
    s.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default()
}

fn suggest<'a>(key: &str, options: impl IntoIterator<Item = &'a str>) -> Option<String> {
    options
        .into_iter()
        .map(|o| (strsim::damerau_levenshtein(key, o), o))
        .filter(|(d, o)| *d <= 2 && *d < o.len())
        .min()
        .map(|(_, o)| o.to_string())
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

fn as_f64(field: &str, v: &toml::Value) -> Result<f64, ConfigError> {
    match v {
        toml::Value::Float(x) => Ok(*x),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(invalid(field, "expected a number")),
    }
}

fn as_list(field: &str, v: &toml::Value) -> Result<Vec<f64>, ConfigError> {
    match v {
        toml::Value::Array(a) => a.iter().map(|x| as_f64(field, x)).collect(),
        other => as_f64(field, other).map(|x| vec![x]),
    }
}

fn as_count(field: &str, v: &toml::Value) -> Result<usize, ConfigError> {
    match v {
        toml::Value::Integer(i) if *i >= 1 => Ok(*i as usize),
        _ => Err(invalid(field, "expected a positive integer")),
    }
}

/// Parse and normalize a config, collecting every problem found.
pub fn validate(text: &str) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| vec![ConfigError::Parse(e.message().to_string())])?;
    let mut errs = Vec::new();
    for k in table.keys() {
        if !TOP_KEYS.contains(&k.as_str()) {
            errs.push(ConfigError::UnknownKey { key: k.clone(), scope: "the top level".into(), suggestion: suggest(k, TOP_KEYS) });
        }
    }
    let experiment = match table.get("experiment") {
        None => {
            errs.push(ConfigError::Missing("experiment".into()));
            None
        }
        Some(toml::Value::String(s)) => match EXPERIMENTS.iter().find(|e| e.0 == s) {
            Some(e) => Some(e.1),
            None => {
                let names = EXPERIMENTS.iter().map(|e| e.0);
                errs.push(invalid("experiment", format!("unknown experiment `{s}`{}", hint(&suggest(s, names)))));
                None
            }
        },
        Some(_) => {
            errs.push(invalid("experiment", "expected a string"));
            None
        }
    };
    let seed = match table.get("seed") {
        None => {
            errs.push(ConfigError::Missing("seed".into()));
            None
        }
        Some(toml::Value::Integer(i)) if *i >= 0 => Some(*i as u64),
        Some(_) => {
            errs.push(invalid("seed", "expected a non-negative integer"));
            None
        }
    };
    let output_dir = match table.get("output_dir") {
        None => PathBuf::from("brownflow_out"),
        Some(toml::Value::String(s)) => PathBuf::from(s),
        Some(_) => {
            errs.push(invalid("output_dir", "expected a string"));
            PathBuf::new()
        }
    };
    let empty = toml::Table::new();
    let raw = match table.get("params") {
        None => &empty,
        Some(toml::Value::Table(t)) => t,
        Some(_) => {
            errs.push(invalid("params", "expected a table"));
            &empty
        }
    };
    let params = experiment.map(|e| normalize(e, raw, &mut errs));
    match (experiment, seed, params) {
        (Some(experiment), Some(seed), Some(params)) if errs.is_empty() => Ok(ExperimentConfig { experiment, seed, output_dir, params }),
        _ => Err(errs),
    }
}

fn normalize(e: Experiment, raw: &toml::Table, errs: &mut Vec<ConfigError>) -> Params {
    let allowed = e.params();
    for k in raw.keys() {
        if !allowed.contains(&k.as_str()) {
            let suggestion = suggest(k, allowed.iter().copied()).or_else(|| suggest(k, ALL_PARAMS));
            errs.push(ConfigError::UnknownKey { key: k.clone(), scope: format!("params of {e}"), suggestion });
        }
    }
    let num = |errs: &mut Vec<ConfigError>, key: &str, v: Option<toml::Value>, default: f64| -> f64 {
        match v.map(|v| as_f64(key, &v)) {
            None => default,
            Some(Ok(x)) if x.is_finite() && x > 0.0 => x,
            Some(Ok(_)) => {
                errs.push(invalid(key, "must be positive and finite"));
                default
            }
            Some(Err(err)) => {
                errs.push(err);
                default
            }
        }
    };
    let count = |errs: &mut Vec<ConfigError>, key: &str, v: Option<toml::Value>, default: usize| -> usize {
        match v.map(|v| as_count(key, &v)) {
            None => default,
            Some(Ok(x)) => x,
            Some(Err(err)) => {
                errs.push(err);
                default
            }
        }
    };
    let list = |errs: &mut Vec<ConfigError>, key: &str, v: Option<toml::Value>| -> Option<Vec<f64>> {
        match v.map(|v| as_list(key, &v)) {
            None => None,
            Some(Ok(x)) if !x.is_empty() && x.iter().all(|v| v.is_finite()) => Some(x),
            Some(Ok(_)) => {
                errs.push(invalid(key, "must be a non-empty list of finite numbers"));
                None
            }
            Some(Err(err)) => {
                errs.push(err);
                None
            }
        }
    };

    let mut p = Params::default();
    let default_horizon = if e == Experiment::WedgeLaplace { 1e6 } else { 1.0 };
    let v = raw.get("horizon").cloned();
    let horizon = num(errs, "horizon", v, default_horizon);
    p.horizon = Some(horizon);
    let default_dt = match e {
        Experiment::WedgeLaplace => 1e-5,
        Experiment::VerifySuite => 1e-4,
        _ => 1e-3 * horizon,
    };
    let v = raw.get("dt").cloned();
    let dt = num(errs, "dt", v, default_dt);
    p.dt = Some(dt);
    let default_replicas = match e {
        Experiment::FlowPlusKernel => 1000,
        Experiment::ChaosCompare => 100,
        Experiment::VerifySuite => 2000,
        _ => 10_000,
    };
    let v = raw.get("replicas").cloned();
    p.replicas = Some(count(errs, "replicas", v, default_replicas));
    if dt > horizon && e != Experiment::WedgeLaplace {
        errs.push(invalid("dt", "must not exceed horizon"));
    }

    if allowed.contains(&"x0") {
        let v = raw.get("x0").cloned();
        let x0 = list(errs, "x0", v);
        let x0 = match (e, x0) {
            (Experiment::WedgeLaplace, None) => Some(vec![-0.1, 0.1]),
            (Experiment::ChaosCompare, None) => Some(vec![0.5]),
            (_, None) => {
                if !raw.contains_key("x0") {
                    errs.push(ConfigError::Missing("params.x0".into()));
                }
                None
            }
            (_, x) => x,
        };
        if let Some(x) = &x0 {
            if e == Experiment::WedgeLaplace && x.len() != 2 {
                errs.push(invalid("x0", "wedge_laplace takes exactly two starting points"));
            }
            if e == Experiment::FlowPm && x.windows(2).any(|w| w[0] > w[1]) {
                errs.push(invalid("x0", "starting points must be sorted"));
            }
        }
        p.x0 = x0;
    }
    if allowed.contains(&"M") {
        let v = raw.get("M").cloned();
        p.m = Some(count(errs, "M", v, 256));
    }
    if allowed.contains(&"n_max") {
        let v = raw.get("n_max").cloned();
        p.n_max = Some(count(errs, "n_max", v, 6));
    }
    if allowed.contains(&"nodes") {
        let v = raw.get("nodes").cloned();
        let n = count(errs, "nodes", v, 1025);
        if n < 3 {
            errs.push(invalid("nodes", "need at least 3 nodes"));
        }
        p.nodes = Some(n);
    }
    if allowed.contains(&"coarsen") {
        let v = raw.get("coarsen").cloned();
        let c = count(errs, "coarsen", v, 10);
        let steps = (horizon / dt).round();
        if (steps - horizon / dt).abs() > 1e-9 * steps || steps as usize % c != 0 {
            errs.push(invalid("coarsen", format!("horizon/dt = {} must be a multiple of coarsen = {c}", horizon / dt)));
        }
        p.coarsen = Some(c);
    }
    if allowed.contains(&"alpha") {
        let (da, de) = match e {
            Experiment::WedgeLaplace => (vec![0.5, 1.0, 2.0], vec![0.01]),
            _ => (vec![0.1], vec![0.2]),
        };
        let v = raw.get("alpha").cloned();
        let alpha = list(errs, "alpha", v).unwrap_or(da);
        let v = raw.get("eps").cloned();
        let eps = list(errs, "eps", v).unwrap_or(de);
        if alpha.iter().chain(&eps).any(|&v| v <= 0.0) {
            errs.push(invalid("alpha", "alpha and eps values must be positive"));
        }
        if e == Experiment::VerifySuite {
            if alpha.len() != eps.len() {
                errs.push(invalid("eps", "alpha and eps are paired and must have the same length"));
            } else if let Some((a, b)) = alpha.iter().zip(&eps).find(|(a, b)| a >= b) {
                errs.push(invalid("alpha", format!("exit level alpha = {a} must be below eps = {b}")));
            }
        }
        p.alpha = Some(alpha);
        p.eps = Some(eps);
    }
    p
}

/// The normalized config as TOML.
pub fn echo(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("simulation failed: {0}")]
    Simulation(String),
}

fn sim<E: fmt::Display>(e: E) -> RunError {
    RunError::Simulation(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub pass: bool,
    pub reports: Vec<TestReport>,
    pub artifacts: Vec<Artifact>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

/// Rows of stringified cells; floats carry 17 significant digits.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

fn fnum(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn atomic_write(dir: &Path, name: &str, bytes: &[u8]) -> Result<Artifact, RunError> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let io = |source| RunError::Io { path: path.clone(), source };
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, &path).map_err(io)?;
    let sha256 = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok(Artifact { name: name.to_string(), sha256, bytes: bytes.len() })
}

/// Run an experiment and write its artifacts; `threads` sizes a private
/// worker pool (results do not depend on it).
pub fn run(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<RunOutcome, RunError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(sim)?;
    let (tables, reports) = pool.install(|| execute(cfg))?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
    let mut artifacts = Vec::new();
    for (name, t) in &tables {
        artifacts.push(atomic_write(dir, name, &t.to_bytes())?);
    }
    let rep = serde_json::to_vec_pretty(&reports).map_err(sim)?;
    artifacts.push(atomic_write(dir, "reports.json", &rep)?);
    let pass = reports.iter().all(|r| r.pass);
    let manifest = serde_json::json!({
        "library_version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment,
        "config": echo(cfg),
        "pass": pass,
        "reports": reports.iter().map(|r| serde_json::json!({"name": r.name, "pass": r.pass})).collect::<Vec<_>>(),
        "files": artifacts,
    });
    atomic_write(dir, "manifest.json", &serde_json::to_vec_pretty(&manifest).map_err(sim)?)?;
    Ok(RunOutcome { pass, reports, artifacts })
}

type Output = (Vec<(String, Table)>, Vec<TestReport>);

fn execute(cfg: &ExperimentConfig) -> Result<Output, RunError> {
    let p = &cfg.params;
    let horizon = p.horizon.unwrap_or(1.0);
    let dt = p.dt.unwrap_or(1e-3);
    let replicas = p.replicas.unwrap_or(1);
    match cfg.experiment {
        Experiment::FlowPm => n_point(cfg, None),
        Experiment::FlowPlusCoalescing => n_point(cfg, Some(PlusMode::Coalescing)),
        Experiment::FlowPlusKernel => kernel(cfg.seed, p.x0.as_deref().unwrap_or(&[]), horizon, dt, replicas, p.m.unwrap_or(256)),
        Experiment::WedgeLaplace => laplace(cfg.seed, p, horizon, dt, replicas),
        Experiment::ChaosCompare => chaos_compare(cfg.seed, p, horizon, dt, replicas),
        Experiment::VerifySuite => verify_suite(cfg.seed, p, horizon, dt, replicas),
    }
}

fn grid_for(horizon: f64, dt: f64) -> Result<TimeGrid<f64>, RunError> {
    make_grid(0.0, horizon, dt).map(|g| g.grid).map_err(sim)
}

fn n_point(cfg: &ExperimentConfig, mode: Option<PlusMode>) -> Result<Output, RunError> {
    let p = &cfg.params;
    let x0 = p.x0.clone().unwrap_or_default();
    let grid = grid_for(p.horizon.unwrap_or(1.0), p.dt.unwrap_or(1e-3))?;
    let n = x0.len();
    let runs: Vec<Vec<(f64, usize)>> = (0..p.replicas.unwrap_or(1))
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(cfg.seed, r as u64);
            match mode {
                None => {
                    let b = sample_bundle(grid, &[Label::WPlus, Label::WMinus], s).map_err(sim)?;
                    let path = simulate_n_point_pm(&x0, &b).map_err(sim)?;
                    let k = path.n_steps();
                    Ok(path.terminal().into_iter().enumerate().map(|(i, x)| (x, path.class_id(i, k))).collect())
                }
                Some(m) => {
                    let b = sample_bundle(grid, &plus_labels(n), s).map_err(sim)?;
                    let path = simulate_n_point_plus(&x0, &b, m).map_err(sim)?;
                    let ids = path.class_ids.last().cloned().unwrap_or_default();
                    Ok(path.terminal().into_iter().zip(ids.into_iter().map(|c| c as usize)).collect())
                }
            }
        })
        .collect::<Result<_, RunError>>()?;
    let mut t = Table::new(&["replica", "particle", "x0", "x_t", "class"]);
    for (r, run) in runs.iter().enumerate() {
        for (i, &(x, c)) in run.iter().enumerate() {
            t.rows.push(vec![r.to_string(), i.to_string(), fnum(x0[i]), fnum(x), c.to_string()]);
        }
    }
    let sd = grid.duration().sqrt();
    let mut reports = Vec::new();
    if runs.len() >= 50 {
        for (i, &x) in x0.iter().enumerate() {
            let xs: Vec<f64> = runs.iter().map(|r| r[i].0).collect();
            let mut rep = ks_test(&xs, |y| normal_cdf((y - x) / sd), 0.01).map_err(sim)?;
            rep.name = format!("one_point_marginal_particle_{i}");
            reports.push(rep.with_inputs(serde_json::json!({"x0": x, "t": grid.duration(), "dt": grid.dt, "replicas": runs.len()})));
        }
    }
    Ok((vec![("terminal.csv".into(), t)], reports))
}

fn bump(x: f64) -> f64 {
    (-0.5 * x * x).exp()
}

fn heat_value(f: fn(f64) -> f64, t: f64, x: f64) -> Result<f64, RunError> {
    let g = FunctionGrid::default_for(t.max(x * x / 16.0 + 1.0), f).map_err(sim)?;
    Ok(heat_apply(&g, t).map_err(sim)?.value(x))
}

fn kernel(seed: u64, x0: &[f64], horizon: f64, dt: f64, replicas: usize, m: usize) -> Result<Output, RunError> {
    let grid = grid_for(horizon, dt)?;
    let mut t = Table::new(&["x0", "replica", "kf", "stays_positive", "support_spread"]);
    let mut reports = Vec::new();
    for (xi, &x) in x0.iter().enumerate() {
        let rows: Vec<(f64, bool, f64)> = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let s = derive_seed(derive_seed(seed, xi as u64), r as u64);
                let wp = Substream::new(s, Label::WPlus).increments(grid.n_steps, grid.sqrt_dt());
                let est = estimate_kernel_plus(x, grid, &wp, s, m, derive_seed(s, 1)).map_err(sim)?;
                let lo = est.support.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = est.support.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Ok((kernel_apply(&est, bump).map_err(sim)?, stays_positive(x, &wp), hi - lo))
            })
            .collect::<Result<_, RunError>>()?;
        for (r, &(kf, pos, spread)) in rows.iter().enumerate() {
            t.rows.push(vec![fnum(x), r.to_string(), fnum(kf), pos.to_string(), fnum(spread)]);
        }
        let s = mc_summary(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
        let target = heat_value(bump, grid.duration(), x)?;
        reports.push(
            TestReport::within(&format!("kernel_mean_x0_{x}"), "mean K f(x0) - P_t f(x0)", s.mean - target, 3.0 * s.stderr)
                .with_inputs(serde_json::json!({"x0": x, "t": grid.duration(), "M": m, "replicas": replicas, "target": target})),
        );
        let spread = rows.iter().filter(|r| r.1).map(|r| r.2).fold(0.0, f64::max);
        reports.push(TestReport::within(&format!("dirac_on_positive_paths_x0_{x}"), "max support spread", spread, 0.0));
    }
    Ok((vec![("kernel.csv".into(), t)], reports))
}

fn laplace(seed: u64, p: &Params, horizon: f64, dt: f64, replicas: usize) -> Result<Output, RunError> {
    let x0 = p.x0.clone().unwrap_or_default();
    let eps = p.eps.clone().unwrap_or_default();
    let mut cfg = TwoPointConfig::new(x0[0], x0[1], dt, horizon);
    cfg.eps = eps.clone();
    let runs: Vec<_> = (0..replicas).into_par_iter().map(|r| run_two_point(&cfg, derive_seed(seed, r as u64))).collect();
    let mut header = vec!["replica", "t", "d_time", "out_time", "corner_d_time", "coalesced", "censored"];
    let cols: Vec<String> = eps.iter().map(|e| format!("crossings_{e}")).collect();
    header.extend(cols.iter().map(String::as_str));
    let mut t = Table::new(&header);
    for (r, o) in runs.iter().enumerate() {
        let mut row = vec![
            r.to_string(),
            fnum(o.t),
            fnum(o.d_time),
            fnum(o.out_time),
            o.corner_d_time.map(fnum).unwrap_or_default(),
            o.coalesced.to_string(),
            o.censored.to_string(),
        ];
        row.extend(o.crossings.iter().map(|c| c.to_string()));
        t.rows.push(row);
    }
    let mut summary = Table::new(&["eps", "alpha", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "difference", "tolerance", "pass", "lhs_corner"]);
    let mut reports = Vec::new();
    for (ei, &e) in eps.iter().enumerate() {
        let s = laplace_identity_samples(&runs, ei, e, dt);
        for &a in p.alpha.as_deref().unwrap_or(&[]) {
            let c = laplace_compare(&s, a);
            summary.rows.push(vec![
                fnum(e),
                fnum(a),
                fnum(c.lhs.mean),
                fnum(c.lhs.stderr),
                fnum(c.rhs.mean),
                fnum(c.rhs.stderr),
                fnum(c.report.value),
                fnum(c.report.tolerance),
                c.report.pass.to_string(),
                fnum(c.lhs_corner.mean),
            ]);
            let mut rep = c.report;
            rep.name = format!("{}_eps_{e}", rep.name);
            reports.push(rep);
        }
    }
    let censored = runs.iter().filter(|o| o.censored).count() as f64 / replicas as f64;
    reports.push(TestReport::within("censored_fraction", "fraction of runs not coalesced by the horizon", censored, 0.01));
    Ok((vec![("runs.csv".into(), t), ("laplace.csv".into(), summary)], reports))
}

fn chaos_compare(seed: u64, p: &Params, horizon: f64, dt: f64, replicas: usize) -> Result<Output, RunError> {
    let grid = grid_for(horizon, dt)?;
    let (m, n_max, c, nodes) = (p.m.unwrap_or(256), p.n_max.unwrap_or(6), p.coarsen.unwrap_or(10), p.nodes.unwrap_or(1025));
    let half = 8.0 * horizon.sqrt();
    let fg = FunctionGrid::from_fn(-half, half, nodes, bump).map_err(sim)?;
    let f2 = FunctionGrid::from_fn(-half, half, nodes, |x| bump(x).powi(2)).map_err(sim)?;
    let mut header: Vec<String> = ["x0", "replica", "chaos", "nested", "nested_stderr"].iter().map(|s| s.to_string()).collect();
    header.extend((0..=n_max).map(|k| format!("level_{k}")));
    let mut t = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    let mut reports = Vec::new();
    for (xi, &x) in p.x0.as_deref().unwrap_or(&[]).iter().enumerate() {
        let rows: Vec<(f64, f64, f64, Vec<f64>)> = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let s = derive_seed(derive_seed(seed, xi as u64), r as u64);
                let wp = Substream::new(s, Label::WPlus).increments(grid.n_steps, grid.sqrt_dt());
                let est = estimate_kernel_plus(x, grid, &wp, s, m, derive_seed(s, 1)).map_err(sim)?;
                let vals: Vec<f64> = est.support.iter().map(|&y| bump(y)).collect();
                let inner = mc_summary(&vals);
                let coarse = coarsen(&wp, c);
                let cs = chaos_sum(&fg, (0.0, grid.duration()), n_max, ChaosNoise::Plus(&coarse), x).map_err(sim)?;
                Ok((cs.value, inner.mean, inner.stderr, cs.levels))
            })
            .collect::<Result<_, RunError>>()?;
        for (r, row) in rows.iter().enumerate() {
            let mut cells = vec![fnum(x), r.to_string(), fnum(row.0), fnum(row.1), fnum(row.2)];
            cells.extend(row.3.iter().map(|&v| fnum(v)));
            t.rows.push(cells);
        }
        let diff = mc_summary(&rows.iter().map(|r| r.0 - r.1).collect::<Vec<_>>());
        let inputs = serde_json::json!({"x0": x, "t": grid.duration(), "dt": dt, "coarsen": c, "M": m, "n_max": n_max, "nodes": nodes, "replicas": replicas});
        reports.push(TestReport::within(&format!("chaos_vs_filtering_x0_{x}"), "mean(chaos - nested)", diff.mean, 3.0 * diff.stderr).with_inputs(inputs));
        for k in 1..=n_max {
            let s = mc_summary(&rows.iter().map(|r| r.3[k]).collect::<Vec<_>>());
            reports.push(TestReport::within(&format!("chaos_level_{k}_mean_x0_{x}"), "mean J^n f(x0)", s.mean, 3.0 * s.stderr));
        }
        let chaos: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let cm = mc_summary(&chaos);
        let sq: Vec<f64> = chaos.iter().map(|v| (v - cm.mean).powi(2)).collect();
        let vs = mc_summary(&sq);
        let pf = heat_apply(&fg, grid.duration()).map_err(sim)?.value(x);
        let pf2 = heat_apply(&f2, grid.duration()).map_err(sim)?.value(x);
        let bound = pf2 - pf * pf;
        reports.push(TestReport::at_least(&format!("chaos_variance_bound_x0_{x}"), "bound + 3 sigma - Var(chaos)", bound + 3.0 * vs.stderr - cm.std.powi(2), 0.0));
    }
    Ok((vec![("compare.csv".into(), t)], reports))
}

fn verify_suite(seed: u64, p: &Params, horizon: f64, dt: f64, replicas: usize) -> Result<Output, RunError> {
    let grid = grid_for(horizon, dt)?;
    let sd = grid.sqrt_dt();
    let mut reports = Vec::new();
    for (i, &x) in [-1.0, 0.0, 1.0].iter().enumerate() {
        let xs: Vec<f64> = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let s = derive_seed(derive_seed(seed, i as u64), r as u64);
                let wp = Substream::new(s, Label::WPlus).increments(grid.n_steps, sd);
                let mut wm = Substream::new(s, Label::WMinus);
                one_point_terminal_pm(x, &wp, || wm.increment(sd))
            })
            .collect();
        let t = grid.duration().sqrt();
        let mut rep = ks_test(&xs, |y| normal_cdf((y - x) / t), 0.01).map_err(sim)?;
        rep.name = format!("one_point_marginal_x0_{x}");
        reports.push(rep);
    }
    let alphas = p.alpha.clone().unwrap_or_default();
    let epss = p.eps.clone().unwrap_or_default();
    for (j, (&a, &e)) in alphas.iter().zip(&epss).enumerate() {
        reports.push(exit_probability_check(a, e, replicas, dt, derive_seed(seed, 100 + j as u64)).map_err(sim)?);
    }
    let mgrid = grid_for(0.5 * horizon, dt)?;
    let f = &test_function_library(2)[0];
    for (ci, cov) in [CovarianceKind::CPm, CovarianceKind::CPlus].into_iter().enumerate() {
        let res: Vec<f64> = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let s = derive_seed(derive_seed(seed, 200 + ci as u64), r as u64);
                let x0 = [-0.2, 0.3];
                let pos = match cov {
                    CovarianceKind::CPm => {
                        let b = sample_bundle(mgrid, &[Label::WPlus, Label::WMinus], s).map_err(sim)?;
                        simulate_n_point_pm(&x0, &b).map_err(sim)?.positions
                    }
                    CovarianceKind::CPlus => {
                        let b = sample_bundle(mgrid, &plus_labels(2), s).map_err(sim)?;
                        simulate_n_point_plus(&x0, &b, PlusMode::Kernel).map_err(sim)?.positions
                    }
                };
                path_residual(&pos, mgrid.dt, f, cov).map_err(sim)
            })
            .collect::<Result<_, RunError>>()?;
        let s = mc_summary(&res);
        reports.push(TestReport::within(&format!("martingale_residual_{}_{cov:?}", f.name), "mean residual", s.mean, 3.0 * s.stderr));
    }
    let b = sample_bundle(grid, &[Label::WPlus, Label::WMinus], derive_seed(seed, 300)).map_err(sim)?;
    let xs: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
    let n = grid.n_steps;
    let fp = flow_property_check(&b, 0, n / 3, n, &xs).map_err(sim)?;
    reports.push(TestReport::within("flow_composition", "max |φ_{u,t}∘φ_{s,u} − φ_{s,t}|", fp.max_abs_deviation, fp.merge_tol));
    let mut t = Table::new(&["name", "statistic", "value", "tolerance", "pass"]);
    for r in &reports {
        t.rows.push(vec![r.name.clone(), r.statistic.clone(), fnum(r.value), fnum(r.tolerance), r.pass.to_string()]);
    }
    Ok((vec![("reports.csv".into(), t)], reports))
}
