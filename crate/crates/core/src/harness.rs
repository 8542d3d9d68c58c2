//! Configuration, manifests, output emission and the verification suites.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::airy_limit::{
    g_sc, limit_cdf, moments_by_parts_all, second_difference_richardson,
    uniform_grid, LimitLawRequest, GRID_HI, GRID_LO, GRID_STEP,
};
use crate::error::{KpzError, Result};
use crate::fredholm::gauss_legendre;
use crate::finite_time::{
    finite_F, finite_cdf, finite_parts, finite_trace, g1, kernel_identity_residuals, make_frame,
    trace_analysis,
};
use crate::tasep_sim::{
    boundary_lpp_cdf, dkw_epsilon, empirical_fw, estimate_s, laplacian_var_s, run_ensemble,
    second_class_pmf, step_ic_dominance, step_passage_cdf, weak_pairing, write_run_records,
    SimConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    LimitDist,
    FiniteDist,
    Verify,
    Scaling,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::LimitDist => "limit-dist",
            Command::FiniteDist => "finite-dist",
            Command::Verify => "verify",
            Command::Scaling => "scaling",
        }
    }
}

impl FromStr for Command {
    type Err = KpzError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "simulate" => Command::Simulate,
            "limit-dist" => Command::LimitDist,
            "finite-dist" => Command::FiniteDist,
            "verify" => Command::Verify,
            "scaling" => Command::Scaling,
            _ => return Err(KpzError::Config(format!("unknown command '{s}'"))),
        })
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Flat `key = value` file; `#` starts a comment, lists are comma separated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    pub entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| KpzError::Config(format!("line {}: expected key = value", k + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(KpzError::Config(format!("line {}: empty key", k + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(KpzError::Config(format!("duplicate key '{key}'")));
            }
        }
        Ok(FlatConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.entries.get(key).map(String::as_str).unwrap_or(default)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| KpzError::Config(format!("{key} = '{v}' is not a valid value"))),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn u64_opt(&self, key: &str) -> Result<Option<u64>> {
        self.parsed(key)
    }

    pub fn list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.entries.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| KpzError::Config(format!("{key}: '{x}' is not a number")))
                })
                .collect(),
        }
    }

    /// Grid from `{prefix}_lo`, `{prefix}_hi`, `{prefix}_step`.
    pub fn grid_or(&self, prefix: &str, lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
        let lo = self.f64_or(&format!("{prefix}_lo"), lo)?;
        let hi = self.f64_or(&format!("{prefix}_hi"), hi)?;
        let step = self.f64_or(&format!("{prefix}_step"), step)?;
        if !(step > 0.0 && hi > lo) {
            return Err(KpzError::Config(format!("{prefix} grid: need hi > lo and step > 0")));
        }
        Ok(uniform_grid(lo, hi, step))
    }
}

/// Everything that determines an output. The worker count and output
/// directory are execution details and stay out of the recorded text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: Command,
    pub parameters: BTreeMap<String, String>,
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunManifest {
    /// Seed from `--seed` if given, else the `seed` key, else 0.
    pub fn new(command: Command, config: &FlatConfig, seed: Option<u64>, output_dir: PathBuf) -> Result<Self> {
        let seed = match seed {
            Some(s) => s,
            None => config.u64_opt("seed")?.unwrap_or(0),
        };
        let mut parameters = config.entries.clone();
        parameters.remove("seed");
        Ok(RunManifest { command, parameters, output_dir, seed })
    }

    pub fn config(&self) -> FlatConfig {
        FlatConfig { entries: self.parameters.clone() }
    }

    pub fn canonical_text(&self) -> String {
        let mut out = format!("command={}\nseed={}\n", self.command, self.seed);
        for (k, v) in &self.parameters {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// SHA-256 of the canonical text, lowercase hex.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.canonical_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn comment_block(&self) -> String {
        let mut out = String::new();
        for line in self.canonical_text().lines() {
            out.push_str(&format!("# {line}\n"));
        }
        out.push_str(&format!("# inputs_sha256={}\n", self.content_hash()));
        out
    }
}

/// 15 significant digits.
pub fn format_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.14e}")
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Real(v) => f.write_str(&format_real(*v)),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl CsvTable {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        CsvTable { name: name.to_string(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Manifest as `#` comment lines, then the header row and the data.
    pub fn render(&self, manifest: &RunManifest) -> String {
        let mut out = manifest.comment_block();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(
            self.rows
                .iter()
                .map(|r| match &r[k] {
                    Cell::Real(v) => *v,
                    Cell::Int(v) => *v as f64,
                    Cell::Text(_) => f64::NAN,
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Bound {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Check {
    pub fn at_most(name: &str, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.to_string(),
            measured,
            tolerance,
            bound: Bound::AtMost,
            pass: measured <= tolerance,
            seed: None,
        }
    }

    pub fn at_least(name: &str, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.to_string(),
            measured,
            tolerance,
            bound: Bound::AtLeast,
            pass: measured >= tolerance,
            seed: None,
        }
    }

    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Identities,
    Tails,
    Moments,
    Crossval,
}

impl FromStr for Suite {
    type Err = KpzError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "" => return Err(KpzError::Usage("empty suite name".into())),
            "identities" => Suite::Identities,
            "tails" => Suite::Tails,
            "moments" => Suite::Moments,
            "crossval" => Suite::Crossval,
            other => {
                return Err(KpzError::Usage(format!(
                    "unknown suite '{other}' (identities, tails, moments, crossval)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub manifest: RunManifest,
    pub inputs_sha256: String,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| KpzError::Numeric(format!("json: {e}")))
    }
}

/// Least-squares slope and intercept of y on x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Rate c in |r(s)| ~ C e^{-c s}; NaN if some residual is zero.
pub fn exponential_rate(s: &[f64], r: &[f64]) -> f64 {
    let y: Vec<f64> = r.iter().map(|v| v.abs().ln()).collect();
    -linear_fit(s, &y).0
}

/// Fitted c in F(s) ~ C e^{-c |s|^{3/2}} on the left tail; NaN when some value is not positive.
pub fn three_halves_rate(s: &[f64], f: &[f64]) -> f64 {
    let x: Vec<f64> = s.iter().map(|v| v.abs().powf(1.5)).collect();
    let y: Vec<f64> = f.iter().map(|v| if *v > 0.0 { v.ln() } else { f64::NAN }).collect();
    -linear_fit(&x, &y).0
}

/// Log-log slope.
pub fn power_exponent(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.abs().ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).0
}

/// Compactly supported test function (1 - w^2)^4 on |w| < 1.
pub fn bump(w: f64) -> f64 {
    if w.abs() < 1.0 {
        (1.0 - w * w).powi(4)
    } else {
        0.0
    }
}

pub fn bump_second(w: f64) -> f64 {
    if w.abs() < 1.0 {
        let q = 1.0 - w * w;
        q * q * (56.0 * w * w - 8.0)
    } else {
        0.0
    }
}

/// (chi/4) int g_sc'' f = (chi/4) int g_sc f'' for the even bump, with
/// Gauss-Legendre nodes on (0, 1).
pub fn pairing_limit(chi: f64, n_nodes: usize) -> Result<f64> {
    let (x, wt) = gauss_legendre(n_nodes);
    let mut acc = 0.0;
    for (xi, wi) in x.iter().zip(&wt) {
        let w = 0.5 * (xi + 1.0);
        acc += 0.5 * wi * g_sc(w)? * bump_second(w);
    }
    Ok(chi / 4.0 * 2.0 * acc)
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| KpzError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Outputs of one command; nothing touches the disk until `write_outputs`.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub tables: Vec<CsvTable>,
    pub report: Option<VerifyReport>,
    pub run_records: Option<Vec<u8>>,
}

pub fn execute(manifest: &RunManifest, workers: usize) -> Result<Outcome> {
    with_pool(workers, || match manifest.command {
        Command::Simulate => run_simulate(manifest),
        Command::LimitDist => run_limit_dist(manifest),
        Command::FiniteDist => run_finite_dist(manifest),
        Command::Verify => {
            let suite: Suite = manifest.config().str_or("suite", "").parse()?;
            let report = run_verify(suite, manifest)?;
            Ok(Outcome { tables: Vec::new(), report: Some(report), run_records: None })
        }
        Command::Scaling => Ok(Outcome { tables: run_scaling(manifest)?, report: None, run_records: None }),
    })?
}

/// Writes every table as `<name>.csv`, the verify report as
/// `verify_report.json` and run records as `runs.bin` plus a manifest
/// sidecar. Returns the written paths.
pub fn write_outputs(manifest: &RunManifest, outcome: &Outcome) -> Result<Vec<PathBuf>> {
    let dir = &manifest.output_dir;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for table in &outcome.tables {
        let path = dir.join(format!("{}.csv", table.name));
        fs::write(&path, table.render(manifest))?;
        written.push(path);
    }
    if let Some(report) = &outcome.report {
        let path = dir.join("verify_report.json");
        fs::write(&path, report.to_json()? + "\n")?;
        written.push(path);
    }
    if let Some(bytes) = &outcome.run_records {
        let path = dir.join("runs.bin");
        fs::write(&path, bytes)?;
        written.push(path);
        let side = dir.join("runs.manifest.json");
        let record = serde_json::json!({
            "manifest": manifest,
            "inputs_sha256": manifest.content_hash(),
        });
        let text = serde_json::to_string_pretty(&record).map_err(|e| KpzError::Numeric(e.to_string()))?;
        fs::write(&side, text + "\n")?;
        written.push(side);
    }
    Ok(written)
}

fn sim_config(cfg: &FlatConfig, seed: u64) -> Result<SimConfig> {
    let rho = cfg.f64_or("rho", 0.5)?;
    let t_max = cfg.f64_or("t_max", cfg.f64_or("t", 50.0)?)?;
    let mut sim = SimConfig::new(rho, t_max, cfg.usize_or("n_runs", 1000)?, seed)?;
    sim.ring_size = cfg.usize_or("ring_size", sim.ring_size)?;
    sim.w_list = cfg.list_or("w_list", &[0.3])?;
    sim.s_grid = cfg.grid_or("s", -4.0, 4.0, 0.25)?;
    sim.validate()?;
    Ok(sim)
}

fn run_simulate(manifest: &RunManifest) -> Result<Outcome> {
    let cfg = manifest.config();
    let sim = sim_config(&cfg, manifest.seed)?;
    let ens = run_ensemble(&sim, sim.t_max)?;
    let direct = estimate_s(&ens)?;
    let lap = laplacian_var_s(&ens)?;

    let mut two = CsvTable::new("two_point", &["j", "S_hat", "stderr", "S_laplacian", "stderr_laplacian"]);
    for k in 0..direct.j_offsets.len() {
        two.push(vec![
            direct.j_offsets[k].into(),
            direct.s_hat[k].into(),
            direct.stderr[k].into(),
            lap.s_hat[k].into(),
            lap.stderr[k].into(),
        ]);
    }
    let mut rules = CsvTable::new("two_point_rules", &["estimator", "quantity", "value", "stderr", "target"]);
    let chi = ens.chi();
    let drift = (1.0 - 2.0 * ens.rho) * ens.t;
    for (label, est) in [("direct", &direct), ("laplacian", &lap)] {
        rules.push(vec![label.into(), "sum".into(), est.sum.value.into(), est.sum.stderr.into(), chi.into()]);
        rules.push(vec![
            label.into(),
            "first_moment".into(),
            est.first_moment.value.into(),
            est.first_moment.stderr.into(),
            drift.into(),
        ]);
        rules.push(vec![
            label.into(),
            "centered_second_moment".into(),
            est.centered_second_moment.value.into(),
            est.centered_second_moment.stderr.into(),
            f64::NAN.into(),
        ]);
    }

    let mut fw = CsvTable::new("empirical_fw", &["w", "site", "s", "cdf"]);
    let mut mom = CsvTable::new(
        "height_moments",
        &["w", "site", "mean", "mean_stderr", "second_moment", "second_moment_stderr", "variance", "variance_stderr"],
    );
    for &w in &sim.w_list {
        let e = empirical_fw(&ens, w, &sim.s_grid)?;
        for (s, c) in e.curve.s.iter().zip(&e.curve.cdf) {
            fw.push(vec![w.into(), e.site.into(), (*s).into(), (*c).into()]);
        }
        mom.push(vec![
            w.into(),
            e.site.into(),
            e.mean.value.into(),
            e.mean.stderr.into(),
            e.second_moment.value.into(),
            e.second_moment.stderr.into(),
            e.variance.value.into(),
            e.variance.stderr.into(),
        ]);
    }
    let mut bytes = Vec::new();
    write_run_records(&ens, &mut bytes)?;
    Ok(Outcome { tables: vec![two, rules, fw, mom], report: None, run_records: Some(bytes) })
}

fn run_limit_dist(manifest: &RunManifest) -> Result<Outcome> {
    let cfg = manifest.config();
    let w_list = cfg.list_or("w_list", &[0.3])?;
    let s_grid = cfg.grid_or("s", GRID_LO, GRID_HI, GRID_STEP)?;
    let n_quad = cfg.usize_or("n_quad", crate::fredholm::DEFAULT_NODES)?;
    let mut curve_t = CsvTable::new("limit_cdf", &["w", "s", "cdf", "pdf"]);
    let mut mom_t = CsvTable::new("limit_moments", &["w", "order", "moment", "error_estimate"]);
    for &w in &w_list {
        let curve = limit_cdf(&LimitLawRequest { w, s_grid: s_grid.clone(), n_quad })?;
        for k in 0..curve.s.len() {
            curve_t.push(vec![w.into(), curve.s[k].into(), curve.cdf[k].into(), curve.pdf[k].into()]);
        }
        for (ell, (m, e)) in curve.moments.iter().zip(&curve.moment_errors).enumerate() {
            mom_t.push(vec![w.into(), (ell as i64).into(), (*m).into(), (*e).into()]);
        }
    }
    Ok(Outcome { tables: vec![curve_t, mom_t], report: None, run_records: None })
}

fn run_finite_dist(manifest: &RunManifest) -> Result<Outcome> {
    let cfg = manifest.config();
    let rho = cfg.f64_or("rho", 0.5)?;
    let t = cfg.f64_or("t", 100.0)?;
    let w_list = cfg.list_or("w_list", &[0.3])?;
    let s_grid = cfg.grid_or("s", GRID_LO, GRID_HI, GRID_STEP)?;
    let mut table = CsvTable::new(
        "finite_dist",
        &["rho", "t", "w", "s", "F", "g1", "g2", "g3", "G0", "Fw_cdf", "trace"],
    );
    for &w in &w_list {
        let curve = finite_cdf(rho, t, w, &s_grid)?;
        let parts: Result<Vec<_>> = {
            use rayon::prelude::*;
            s_grid.par_iter().map(|&s| finite_parts(&make_frame(rho, t, w, s)?)).collect()
        };
        for (k, p) in parts?.iter().enumerate() {
            let g3 = p.g3.unwrap_or(f64::NAN);
            table.push(vec![
                rho.into(),
                t.into(),
                w.into(),
                s_grid[k].into(),
                p.f.into(),
                p.g1.into(),
                p.g2.into(),
                g3.into(),
                (p.g1 + p.g2 + g3).into(),
                curve.cdf[k].into(),
                p.trace.into(),
            ]);
        }
    }
    Ok(Outcome { tables: vec![table], report: None, run_records: None })
}

/// g_sc on |w| for every point of `w_grid` and half steps around it,
/// then the Richardson second difference at step h.
fn g_sc_second_on_grid(w_grid: &[f64], h: f64) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let key = |x: f64| (x.abs() / (0.5 * h)).round() as i64;
    let mut needed: Vec<i64> = w_grid
        .iter()
        .flat_map(|&w| [-2.0, -1.0, 0.0, 1.0, 2.0].map(|k| key(w + 0.5 * k * h)))
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let values: Result<Vec<f64>> = needed.par_iter().map(|&k| g_sc(k as f64 * 0.5 * h)).collect();
    let table: BTreeMap<i64, f64> = needed.into_iter().zip(values?).collect();
    Ok(w_grid
        .iter()
        .map(|&w| {
            let v: Vec<f64> = [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|k| table[&key(w + 0.5 * k * h)]).collect();
            second_difference_richardson(&v, h)
        })
        .collect())
}

/// Rescaled empirical two-point function against (chi/4) g_sc''(w) on a
/// w-grid, plus both sides of the weak pairing and its limit.
pub fn run_scaling(manifest: &RunManifest) -> Result<Vec<CsvTable>> {
    let cfg = manifest.config();
    let sim = sim_config(&cfg, manifest.seed)?;
    let t = sim.t_max;
    let w_grid = cfg.grid_or("w", -1.5, 1.5, 0.1)?;
    let h = cfg.f64_or("h", 0.1)?;
    if !(0.05..=0.3).contains(&h) {
        return Err(KpzError::Config(format!("h = {h} outside [0.05, 0.3]")));
    }
    let ens = run_ensemble(&sim, t)?;
    let est = estimate_s(&ens)?;
    let chi = ens.chi();
    let width = 2.0 * chi.cbrt() * t.powf(2.0 / 3.0);
    let drift = (1.0 - 2.0 * sim.rho) * t;
    let second = g_sc_second_on_grid(&w_grid, h)?;
    let mut table = CsvTable::new("scaling", &["w", "j", "rescaled_S", "rescaled_stderr", "limit"]);
    for (k, &w) in w_grid.iter().enumerate() {
        let j = (drift + w * width).round() as i64;
        let (s, se) = match est.j_offsets.iter().position(|&x| x == j) {
            Some(p) => (est.s_hat[p], est.stderr[p]),
            None => (f64::NAN, f64::NAN),
        };
        table.push(vec![w.into(), j.into(), (width * s).into(), (width * se).into(), (chi / 4.0 * second[k]).into()]);
    }
    let pair = weak_pairing(&ens, &bump)?;
    let limit = pairing_limit(chi, cfg.usize_or("pairing_nodes", 8)?)?;
    let mut wp = CsvTable::new(
        "weak_pairing",
        &["t", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "difference", "difference_stderr", "limit", "relative_gap"],
    );
    wp.push(vec![
        t.into(),
        pair.lhs.value.into(),
        pair.lhs.stderr.into(),
        pair.rhs.value.into(),
        pair.rhs.stderr.into(),
        pair.difference.value.into(),
        pair.difference.stderr.into(),
        limit.into(),
        ((pair.lhs.value - limit) / limit).abs().into(),
    ]);
    Ok(vec![table, wp])
}

/// Executable acceptance checks at the sizes given in the manifest.
pub fn run_verify(suite: Suite, manifest: &RunManifest) -> Result<VerifyReport> {
    let cfg = manifest.config();
    let checks = match suite {
        Suite::Identities => verify_identities(&cfg, manifest.seed)?,
        Suite::Tails => verify_tails(&cfg)?,
        Suite::Moments => verify_moments(&cfg)?,
        Suite::Crossval => verify_crossval(&cfg, manifest.seed)?,
    };
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport { suite, manifest: manifest.clone(), inputs_sha256: manifest.content_hash(), checks, pass })
}

/// Largest |g1 - s (t/chi)^{1/3}| / max(1, |g1|) over random frames.
pub fn g1_identity_residual(n_frames: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_frames {
        let rho = rng.gen_range(0.1..0.9);
        let t = rng.gen_range(10.0..1000.0);
        let w = rng.gen_range(-1.0..1.0);
        let s = rng.gen_range(-5.0..5.0);
        let frame = match make_frame(rho, t, w, s) {
            Ok(f) => f,
            Err(KpzError::Config(_)) => continue,
            Err(e) => return Err(e),
        };
        let v = g1(&frame)?;
        worst = worst.max((v - s * frame.scale()).abs() / v.abs().max(1.0));
    }
    Ok(worst)
}

/// Largest relative residual of the R and L integral identities at `n_x` points.
pub fn identity_residuals(rho: f64, t: f64, w: f64, n_x: usize) -> Result<(f64, f64)> {
    let frame = make_frame(rho, t, w, 0.0)?;
    let mut r: f64 = 0.0;
    let mut l: f64 = 0.0;
    for k in 0..n_x {
        let x = -20.0 + 40.0 * k as f64 / (n_x - 1).max(1) as f64;
        let res = kernel_identity_residuals(&frame, x)?;
        r = r.max(res.r_relative.abs());
        l = l.max(res.l_relative.abs());
    }
    Ok((r, l))
}

fn verify_identities(cfg: &FlatConfig, seed: u64) -> Result<Vec<Check>> {
    let rho = cfg.f64_or("rho", 0.5)?;
    let t = cfg.f64_or("t", 50.0)?;
    let w = cfg.f64_or("w", 0.3)?;
    let mut checks = Vec::new();
    checks.push(Check::at_most("g1_identity", g1_identity_residual(cfg.usize_or("n_frames", 100)?, seed)?, 1e-9).seeded(seed));
    let (r, l) = identity_residuals(rho, t, w, 10)?;
    checks.push(Check::at_most("r_kernel_identity", r, 1e-6));
    checks.push(Check::at_most("l_kernel_identity", l, 1e-6));
    // Widom chain: F <= exp(-trace)
    let mut widom: f64 = f64::NEG_INFINITY;
    for s in [-4.0, -2.0, 0.0, 2.0] {
        let frame = make_frame(rho, t, w, s)?;
        widom = widom.max(finite_F(&frame)? - (-finite_trace(&frame)?).exp());
    }
    checks.push(Check::at_most("widom_chain_excess", widom, 1e-12));
    let frame = make_frame(rho, t.max(100.0), 0.0, -6.0)?;
    let diag = finite_trace(&frame)?;
    let contour = trace_analysis(&frame, crate::finite_time::CONTOUR_POINTS)?
        .trace_value
        .ok_or_else(|| KpzError::Numeric("double-contour trace unavailable".into()))?;
    checks.push(Check::at_most("trace_formulas_relative", ((diag - contour) / diag).abs(), 1e-4));
    Ok(checks)
}

fn verify_tails(cfg: &FlatConfig) -> Result<Vec<Check>> {
    let rho = cfg.f64_or("rho", 0.5)?;
    let t = cfg.f64_or("t", 100.0)?;
    let w = cfg.f64_or("w", 0.3)?;
    let upper = [2.0, 4.0, 6.0, 8.0];
    let resid: Result<Vec<f64>> = upper
        .iter()
        .map(|&s| {
            let frame = make_frame(rho, t, w, s)?;
            let p = finite_parts(&frame)?;
            Ok(s - p.product / frame.scale())
        })
        .collect();
    let lower = [-10.0, -8.0, -6.0];
    let low = finite_cdf(rho, t, w, &lower)?;
    let trace_s: Vec<f64> = uniform_grid(-12.0, -4.0, 1.0);
    let traces: Result<Vec<f64>> = trace_s.iter().map(|&s| finite_trace(&make_frame(rho, t, 0.0, s)?)).collect();
    Ok(vec![
        Check::at_least("upper_tail_rate", exponential_rate(&upper, &resid?), 0.0),
        Check::at_least("lower_tail_three_halves_rate", three_halves_rate(&lower, &low.cdf), 0.0),
        Check::at_least("trace_growth_exponent", power_exponent(&trace_s, &traces?), 1.4),
    ])
}

fn verify_moments(cfg: &FlatConfig) -> Result<Vec<Check>> {
    let w = cfg.f64_or("w", 0.3)?;
    let curve = limit_cdf(&LimitLawRequest::standard(w))?;
    let parts = moments_by_parts_all(w, crate::fredholm::DEFAULT_NODES)?;
    let mut checks = vec![Check::at_most("mean_zero", curve.moments[1].abs(), 1e-3)];
    for ell in 1..=3 {
        checks.push(Check::at_most(&format!("by_parts_order_{ell}"), (parts[ell] - curve.moments[ell]).abs(), 1e-3));
    }
    Ok(checks)
}

/// Largest per-offset |a - b| / sqrt(se_a^2 + se_b^2).
pub fn max_z(a: &[f64], sa: &[f64], b: &[f64], sb: &[f64]) -> f64 {
    (0..a.len())
        .map(|k| (a[k] - b[k]).abs() / (sa[k].powi(2) + sb[k].powi(2)).sqrt().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn verify_crossval(cfg: &FlatConfig, seed: u64) -> Result<Vec<Check>> {
    let rho = cfg.f64_or("rho", 0.5)?;
    let t = cfg.f64_or("t", 20.0)?;
    let n_runs = cfg.usize_or("n_runs", 2000)?;
    let w = cfg.f64_or("w", 0.3)?;
    let chi = rho * (1.0 - rho);
    let mut checks = Vec::new();

    let sim = SimConfig::new(rho, t, n_runs, seed)?;
    let ens = run_ensemble(&sim, t)?;
    let direct = estimate_s(&ens)?;
    checks.push(Check::at_most("sum_rule_sigmas", direct.sum.z_score(chi), 3.0).seeded(seed));
    checks.push(
        Check::at_most("first_moment_sigmas", direct.first_moment.z_score((1.0 - 2.0 * rho) * t), 3.0).seeded(seed),
    );
    let lap_seed = seed.wrapping_add(1);
    let lap = laplacian_var_s(&run_ensemble(&SimConfig::new(rho, t, n_runs, lap_seed)?, t)?)?;
    checks.push(
        Check::at_most("laplacian_vs_direct_max_z", max_z(&direct.s_hat, &direct.stderr, &lap.s_hat, &lap.stderr), 3.0)
            .seeded(lap_seed),
    );
    let sc_seed = seed.wrapping_add(2);
    let sc = second_class_pmf(&SimConfig::new(rho, t, n_runs, sc_seed)?, t)?;
    let scaled: Vec<f64> = direct.s_hat.iter().map(|v| v / chi).collect();
    let scaled_se: Vec<f64> = direct.stderr.iter().map(|v| v / chi).collect();
    checks.push(
        Check::at_most("second_class_vs_direct_max_z", max_z(&scaled, &scaled_se, &sc.pmf, &sc.stderr), 3.0)
            .seeded(sc_seed),
    );

    // exact formulas against sampled laws; frames need t >= 10
    let band = 3.0 * dkw_epsilon(n_runs, 0.05);
    let s_grid = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let step_frame = make_frame(rho, t, 0.0, 0.0)?;
    let lp = step_frame.lattice();
    let us: Vec<f64> = s_grid.iter().map(|&s| Ok(step_frame.with_s(s)?.lattice_u())).collect::<Result<_>>()?;
    let exact: Vec<f64> = s_grid.iter().map(|&s| finite_F(&step_frame.with_s(s)?)).collect::<Result<_>>()?;
    let step_seed = seed.wrapping_add(3);
    let horizon = us.iter().cloned().fold(t, f64::max);
    let step_cfg = SimConfig::new(rho, horizon, n_runs, step_seed)?;
    let mc = step_passage_cdf(&step_cfg, lp.site, lp.level, &us)?;
    checks.push(Check::at_most("step_passage_vs_F", sup_distance(&mc, &exact), band).seeded(step_seed));

    let frame = make_frame(rho, t, w, 0.0)?;
    let lp = frame.lattice();
    let us: Vec<f64> = s_grid.iter().map(|&s| Ok(frame.with_s(s)?.lattice_u())).collect::<Result<_>>()?;
    let exact = finite_cdf(rho, t, w, &s_grid)?;
    let lpp_seed = seed.wrapping_add(4);
    let lpp = boundary_lpp_cdf(rho, lp.plus() as usize, lp.minus() as usize, &us, n_runs, lpp_seed)?;
    checks.push(Check::at_most("boundary_lpp_vs_finite_cdf", sup_distance(&lpp, &exact.cdf), band).seeded(lpp_seed));
    let emp = empirical_fw(&ens, w, &s_grid)?;
    checks.push(Check::at_most("empirical_fw_vs_finite_cdf", sup_distance(&emp.curve.cdf, &exact.cdf), band).seeded(seed));

    let dom_seed = seed.wrapping_add(5);
    let dom_cfg = SimConfig::new(rho, t, n_runs, dom_seed)?;
    let sites: Vec<i64> = vec![-(t as i64) / 4, 0, (t as i64) / 4];
    let base = (2.0 * chi * t) as i64;
    let levels: Vec<i64> = (-3..=3).map(|k| base + 2 * k).collect();
    let dom = step_ic_dominance(&dom_cfg, t, &sites, &levels)?;
    let worst = dom
        .rows
        .iter()
        .map(|r| (r.p_stationary - r.p_step) / r.stderr.max(f64::MIN_POSITIVE))
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::at_most("step_dominance_excess_sigmas", worst, 3.0).seeded(dom_seed));
    checks.push(Check::at_most("step_dominance_pathwise_violations", dom.pathwise_violations as f64, 0.0).seeded(dom_seed));

    let pair = weak_pairing(&ens, &bump)?;
    checks.push(Check::at_most("weak_pairing_sides_sigmas", pair.difference.z_score(0.0), 3.0).seeded(seed));
    Ok(checks)
}
