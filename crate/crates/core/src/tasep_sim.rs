//! Continuous-time TASEP on a ring: exact event-driven dynamics, heights,
//! and the two-point estimators.
//!
//! Paper site x lives at ring index x mod L; bond x joins x and x + 1.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::airy_limit::DistributionCurve;
use crate::error::{KpzError, Result};
use crate::finite_time::make_frame;

pub const MIN_RUNS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub rho: f64,
    pub t_max: f64,
    pub ring_size: usize,
    pub n_runs: usize,
    pub seed: u64,
    pub w_list: Vec<f64>,
    pub s_grid: Vec<f64>,
}

impl SimConfig {
    /// Config with the smallest admissible ring for t_max.
    pub fn new(rho: f64, t_max: f64, n_runs: usize, seed: u64) -> Result<Self> {
        let cfg = SimConfig {
            rho,
            t_max,
            ring_size: Self::min_ring_size(t_max),
            n_runs,
            seed,
            w_list: Vec::new(),
            s_grid: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn min_ring_size(t: f64) -> usize {
        ((4.0 * t + 8.0 * t.max(0.0).powf(2.0 / 3.0)).ceil() as usize).max(16)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(KpzError::Config(format!("rho = {} outside (0, 1)", self.rho)));
        }
        if !(self.t_max >= 0.0 && self.t_max.is_finite()) {
            return Err(KpzError::Config(format!("t_max = {} invalid", self.t_max)));
        }
        if self.ring_size < Self::min_ring_size(self.t_max) {
            return Err(KpzError::Config(format!(
                "ring_size {} below 4t + 8t^(2/3) = {}",
                self.ring_size,
                Self::min_ring_size(self.t_max)
            )));
        }
        if self.n_runs < MIN_RUNS {
            return Err(KpzError::Config(format!("n_runs {} < {MIN_RUNS}", self.n_runs)));
        }
        Ok(())
    }
}

pub type RunRng = ChaCha8Rng;

/// Independent ChaCha stream per (seed, run, purpose).
pub fn run_rng(seed: u64, run_index: u64, purpose: u64) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_index.wrapping_mul(8).wrapping_add(purpose));
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_DYNAMICS: u64 = 1;
const STREAM_SECOND_CLASS: u64 = 2;
const STREAM_COUPLED: u64 = 3;
const STREAM_LPP: u64 = 4;

fn exp_holding(rng: &mut RunRng, rate: f64) -> f64 {
    -(1.0 - rng.gen::<f64>()).ln() / rate
}

/// Bonds whose jump is currently allowed, with O(1) insert and remove.
#[derive(Debug, Clone)]
struct ActiveSet {
    list: Vec<u32>,
    slot: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl ActiveSet {
    fn new(n: usize) -> Self {
        ActiveSet { list: Vec::new(), slot: vec![ABSENT; n] }
    }

    fn set(&mut self, i: usize, on: bool) {
        let here = self.slot[i] != ABSENT;
        if on && !here {
            self.slot[i] = self.list.len() as u32;
            self.list.push(i as u32);
        } else if !on && here {
            let k = self.slot[i] as usize;
            let last = *self.list.last().unwrap();
            self.list.swap_remove(k);
            if last as usize != i {
                self.slot[last as usize] = k as u32;
            }
            self.slot[i] = ABSENT;
        }
    }

    fn len(&self) -> usize {
        self.list.len()
    }

    fn pick(&self, rng: &mut RunRng) -> usize {
        self.list[rng.gen_range(0..self.list.len())] as usize
    }
}

#[derive(Debug, Clone)]
pub struct LatticeState {
    pub occupancy: Vec<bool>,
    /// N_t(j): jumps across bond j since time 0.
    pub jump_counts: Vec<u64>,
    pub time: f64,
    active: ActiveSet,
    tracked: Option<usize>,
    /// Times of the jumps across the tracked bond.
    pub crossings: Vec<f64>,
}

impl LatticeState {
    pub fn from_occupancy(occupancy: Vec<bool>) -> Self {
        let n = occupancy.len();
        let mut active = ActiveSet::new(n);
        for i in 0..n {
            active.set(i, occupancy[i] && !occupancy[(i + 1) % n]);
        }
        LatticeState {
            occupancy,
            jump_counts: vec![0; n],
            time: 0.0,
            active,
            tracked: None,
            crossings: Vec::new(),
        }
    }

    /// Step initial condition: sites x <= 0 occupied on the half ring.
    pub fn step(ring_size: usize) -> Self {
        let half = (ring_size / 2) as i64;
        let occ = (0..ring_size as i64)
            .map(|k| {
                let x = if k > half { k - ring_size as i64 } else { k };
                x <= 0
            })
            .collect();
        Self::from_occupancy(occ)
    }

    pub fn ring_size(&self) -> usize {
        self.occupancy.len()
    }

    pub fn index(&self, x: i64) -> usize {
        x.rem_euclid(self.ring_size() as i64) as usize
    }

    /// Record jump times across bond x from now on.
    pub fn track_bond(&mut self, x: i64) {
        self.tracked = Some(self.index(x));
    }

    pub fn particle_count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }

    fn refresh(&mut self, i: usize) {
        let n = self.ring_size();
        let on = self.occupancy[i] && !self.occupancy[(i + 1) % n];
        self.active.set(i, on);
    }

    fn jump(&mut self, i: usize) {
        let n = self.ring_size();
        let r = (i + 1) % n;
        debug_assert!(self.occupancy[i] && !self.occupancy[r], "exclusion violated at bond {i}");
        self.occupancy[i] = false;
        self.occupancy[r] = true;
        self.jump_counts[i] += 1;
        if self.tracked == Some(i) {
            self.crossings.push(self.time);
        }
        self.refresh((i + n - 1) % n);
        self.refresh(i);
        self.refresh(r);
    }

    /// h_t(j) relative to h_0(0) = 0.
    pub fn height(&self, j: i64) -> i64 {
        self.height_from(0, j)
    }

    /// h_t(x + j) - h_0(x).
    pub fn height_from(&self, x: i64, j: i64) -> i64 {
        let base = 2 * self.jump_counts[self.index(x)] as i64;
        let step = |i: i64| if self.occupancy[self.index(i)] { -1 } else { 1 };
        if j >= 0 {
            base + (x + 1..=x + j).map(step).sum::<i64>()
        } else {
            base - (x + j + 1..=x).map(step).sum::<i64>()
        }
    }
}

/// Bernoulli(rho) product state for run `run_index`.
pub fn init_stationary(config: &SimConfig, run_index: u64) -> LatticeState {
    let mut rng = run_rng(config.seed, run_index, STREAM_INIT);
    let occ = (0..config.ring_size).map(|_| rng.gen_bool(config.rho)).collect();
    LatticeState::from_occupancy(occ)
}

pub fn dynamics_rng(config: &SimConfig, run_index: u64) -> RunRng {
    run_rng(config.seed, run_index, STREAM_DYNAMICS)
}

/// Exact dynamics up to t_target: exponential holding times at rate equal
/// to the number of active bonds, then a uniform active bond jumps.
pub fn evolve(state: &mut LatticeState, t_target: f64, rng: &mut RunRng) -> Result<()> {
    if t_target < state.time {
        return Err(KpzError::Domain(format!("t_target {t_target} < time {}", state.time)));
    }
    loop {
        let n = state.active.len();
        if n == 0 {
            break;
        }
        let dt = exp_holding(rng, n as f64);
        if state.time + dt > t_target {
            break;
        }
        state.time += dt;
        let bond = state.active.pick(rng);
        state.jump(bond);
    }
    state.time = t_target;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub initial: Vec<bool>,
    /// Occupancy at the ensemble time t.
    pub occupancy: Vec<bool>,
    /// N_t per bond at time t.
    pub jumps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeEnsemble {
    pub rho: f64,
    pub t: f64,
    pub ring_size: usize,
    pub seed: u64,
    pub runs: Vec<RunRecord>,
}

impl LatticeEnsemble {
    pub fn chi(&self) -> f64 {
        self.rho * (1.0 - self.rho)
    }
}

/// n_runs independent stationary runs observed at time t (<= t_max).
pub fn run_ensemble(config: &SimConfig, t: f64) -> Result<LatticeEnsemble> {
    config.validate()?;
    if t > config.t_max {
        return Err(KpzError::Config(format!("t = {t} exceeds t_max {}", config.t_max)));
    }
    let runs: Result<Vec<RunRecord>> = (0..config.n_runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut state = init_stationary(config, r);
            let initial = state.occupancy.clone();
            evolve(&mut state, t, &mut dynamics_rng(config, r))?;
            Ok(RunRecord { initial, occupancy: state.occupancy, jumps: state.jump_counts })
        })
        .collect();
    Ok(LatticeEnsemble {
        rho: config.rho,
        t,
        ring_size: config.ring_size,
        seed: config.seed,
        runs: runs?,
    })
}

/// Mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moment {
    pub value: f64,
    pub stderr: f64,
}

impl Moment {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Moment { value: mean, stderr: (var / n).sqrt() }
    }

    /// |value - target| in units of stderr.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target).abs() / self.stderr.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TwoPointEstimate {
    pub j_offsets: Vec<i64>,
    pub s_hat: Vec<f64>,
    pub stderr: Vec<f64>,
    pub t: f64,
    pub rho: f64,
    /// sum_j S over the window.
    pub sum: Moment,
    /// sum_j j S / chi.
    pub first_moment: Moment,
    /// sum_j j^2 S / chi - ((1 - 2 rho) t)^2.
    pub centered_second_moment: Moment,
}

/// Offsets of width 2t (clipped to the ring) centred on (1 - 2 rho) t.
pub fn default_window(rho: f64, t: f64, ring_size: usize) -> Vec<i64> {
    let centre = ((1.0 - 2.0 * rho) * t).round() as i64;
    let half = (t.ceil() as i64).min(ring_size as i64 / 2 - 2).max(1);
    (centre - half..=centre + half).collect()
}

fn estimate_from_runs(offsets: &[i64], per_run: &[Vec<f64>], rho: f64, t: f64) -> Result<TwoPointEstimate> {
    if per_run.len() < MIN_RUNS {
        return Err(KpzError::Statistics(format!("{} runs < {MIN_RUNS}", per_run.len())));
    }
    let chi = rho * (1.0 - rho);
    let drift = (1.0 - 2.0 * rho) * t;
    let col = |k: usize| -> Vec<f64> { per_run.iter().map(|v| v[k]).collect() };
    let mut s_hat = Vec::with_capacity(offsets.len());
    let mut stderr = Vec::with_capacity(offsets.len());
    for k in 0..offsets.len() {
        let m = Moment::from_samples(&col(k));
        s_hat.push(m.value);
        stderr.push(m.stderr);
    }
    let reduce = |f: &dyn Fn(i64, f64) -> f64| -> Moment {
        let xs: Vec<f64> = per_run
            .iter()
            .map(|v| offsets.iter().zip(v).map(|(&j, &s)| f(j, s)).sum())
            .collect();
        Moment::from_samples(&xs)
    };
    Ok(TwoPointEstimate {
        j_offsets: offsets.to_vec(),
        s_hat,
        stderr,
        t,
        rho,
        sum: reduce(&|_, s| s),
        first_moment: reduce(&|j, s| j as f64 * s / chi),
        centered_second_moment: {
            let m = reduce(&|j, s| (j as f64).powi(2) * s / chi);
            Moment { value: m.value - drift * drift, stderr: m.stderr }
        },
    })
}

/// Per-run S(j) = (1/L) sum_x (eta_{x+j}(t) - rho_bar)(eta_x(0) - rho) + chi/L,
/// unbiased for the Bernoulli ring (rho_bar is the conserved density).
fn per_run_s(run: &RunRecord, rho: f64, offsets: &[i64]) -> Vec<f64> {
    let n = run.initial.len();
    let chi = rho * (1.0 - rho);
    let rho_bar = run.occupancy.iter().filter(|&&b| b).count() as f64 / n as f64;
    let e0: Vec<f64> = run.initial.iter().map(|&b| b as u8 as f64 - rho).collect();
    let et: Vec<f64> = run.occupancy.iter().map(|&b| b as u8 as f64 - rho_bar).collect();
    offsets
        .iter()
        .map(|&j| {
            let shift = j.rem_euclid(n as i64) as usize;
            let mut acc = 0.0;
            for x in 0..n {
                let y = if x + shift >= n { x + shift - n } else { x + shift };
                acc += et[y] * e0[x];
            }
            acc / n as f64 + chi / n as f64
        })
        .collect()
}

/// Direct estimator of S(j, t) averaged over all reference sites.
pub fn estimate_s(ens: &LatticeEnsemble) -> Result<TwoPointEstimate> {
    estimate_s_on(ens, &default_window(ens.rho, ens.t, ens.ring_size))
}

pub fn estimate_s_on(ens: &LatticeEnsemble, offsets: &[i64]) -> Result<TwoPointEstimate> {
    let per_run: Vec<Vec<f64>> = ens.runs.par_iter().map(|r| per_run_s(r, ens.rho, offsets)).collect();
    estimate_from_runs(offsets, &per_run, ens.rho, ens.t)
}

/// Per-run (1/L) sum_x (h_t(x+j) - h_0(x) - mu(j))^2 with the exact mean
/// mu(j) = (1 - 2 rho) j + 2 chi t, for j in [lo, hi].
fn per_run_height_var(run: &RunRecord, rho: f64, t: f64, lo: i64, hi: i64) -> Vec<f64> {
    let n = run.initial.len();
    let chi = rho * (1.0 - rho);
    let mu = |j: i64| (1.0 - 2.0 * rho) * j as f64 + 2.0 * chi * t;
    let inc: Vec<i64> = run.occupancy.iter().map(|&b| if b { -1 } else { 1 }).collect();
    let width = (hi - lo + 1) as usize;
    let mut acc = vec![0.0; width];
    let idx = |k: i64| k.rem_euclid(n as i64) as usize;
    for x in 0..n as i64 {
        let base = 2 * run.jumps[x as usize] as i64;
        // h(x + j) - h_0(x) for j = 0, then walk outwards
        let mut h = base;
        for j in 0..=hi.max(0) {
            if j > 0 {
                h += inc[idx(x + j)];
            }
            if j >= lo {
                acc[(j - lo) as usize] += (h as f64 - mu(j)).powi(2);
            }
        }
        let mut h = base;
        for j in (lo.min(0)..0).rev() {
            h -= inc[idx(x + j + 1)];
            if j <= hi {
                acc[(j - lo) as usize] += (h as f64 - mu(j)).powi(2);
            }
        }
    }
    acc.iter().map(|v| v / n as f64).collect()
}

/// S(j, t) = (1/8) Delta Var h_t(j).
pub fn laplacian_var_s(ens: &LatticeEnsemble) -> Result<TwoPointEstimate> {
    laplacian_var_s_on(ens, &default_window(ens.rho, ens.t, ens.ring_size))
}

pub fn laplacian_var_s_on(ens: &LatticeEnsemble, offsets: &[i64]) -> Result<TwoPointEstimate> {
    let lo = offsets[0] - 1;
    let hi = offsets[offsets.len() - 1] + 1;
    let per_run: Vec<Vec<f64>> = ens
        .runs
        .par_iter()
        .map(|r| {
            let v = per_run_height_var(r, ens.rho, ens.t, lo, hi);
            offsets
                .iter()
                .map(|&j| {
                    let k = (j - lo) as usize;
                    (v[k - 1] - 2.0 * v[k] + v[k + 1]) / 8.0
                })
                .collect()
        })
        .collect();
    estimate_from_runs(offsets, &per_run, ens.rho, ens.t)
}

/// Var h_t(j) per offset, with standard errors.
pub fn height_variance(ens: &LatticeEnsemble, offsets: &[i64]) -> Vec<Moment> {
    let lo = offsets[0];
    let hi = offsets[offsets.len() - 1];
    let per_run: Vec<Vec<f64>> =
        ens.runs.par_iter().map(|r| per_run_height_var(r, ens.rho, ens.t, lo, hi)).collect();
    offsets
        .iter()
        .map(|&j| {
            let col: Vec<f64> = per_run.iter().map(|v| v[(j - lo) as usize]).collect();
            Moment::from_samples(&col)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SecondClassEstimate {
    pub t: f64,
    pub offsets: Vec<i64>,
    pub pmf: Vec<f64>,
    pub stderr: Vec<f64>,
    pub displacements: Vec<i64>,
}

impl SecondClassEstimate {
    pub fn mean(&self) -> Moment {
        let xs: Vec<f64> = self.displacements.iter().map(|&x| x as f64).collect();
        Moment::from_samples(&xs)
    }

    /// E X^2 - ((1 - 2 rho) t)^2 with the delta-method error.
    pub fn centered_second_moment(&self, rho: f64) -> Moment {
        let drift = (1.0 - 2.0 * rho) * self.t;
        let xs: Vec<f64> = self.displacements.iter().map(|&x| (x as f64).powi(2)).collect();
        let m = Moment::from_samples(&xs);
        Moment { value: m.value - drift * drift, stderr: m.stderr }
    }
}

/// Species on the coupled lattice: the pair (eta, eta') under the basic
/// coupling, with eta' = eta except at the discrepancy.
const HOLE: u8 = 0;
const FIRST: u8 = 1;
const SECOND: u8 = 2;

fn outranks(a: u8, b: u8) -> bool {
    let rank = |s: u8| match s {
        FIRST => 2,
        SECOND => 1,
        _ => 0,
    };
    rank(a) > rank(b)
}

/// Displacement at time t of the discrepancy started at site 0.
pub fn second_class_displacement(config: &SimConfig, run_index: u64, t: f64) -> i64 {
    let n = config.ring_size;
    let mut init = run_rng(config.seed, run_index, STREAM_INIT);
    let mut sites: Vec<u8> = (0..n).map(|_| if init.gen_bool(config.rho) { FIRST } else { HOLE }).collect();
    sites[0] = SECOND;
    let mut active = ActiveSet::new(n);
    for i in 0..n {
        active.set(i, outranks(sites[i], sites[(i + 1) % n]));
    }
    let mut rng = run_rng(config.seed, run_index, STREAM_SECOND_CLASS);
    let mut time = 0.0;
    let mut disp = 0i64;
    loop {
        let k = active.len();
        if k == 0 {
            break;
        }
        time += exp_holding(&mut rng, k as f64);
        if time > t {
            break;
        }
        let i = active.pick(&mut rng);
        let r = (i + 1) % n;
        if sites[i] == SECOND {
            disp += 1;
        } else if sites[r] == SECOND {
            disp -= 1;
        }
        sites.swap(i, r);
        for b in [(i + n - 1) % n, i, r] {
            active.set(b, outranks(sites[b], sites[(b + 1) % n]));
        }
    }
    disp
}

/// Law of the second-class particle at time t from n_runs coupled runs.
pub fn second_class_pmf(config: &SimConfig, t: f64) -> Result<SecondClassEstimate> {
    config.validate()?;
    if t > config.t_max {
        return Err(KpzError::Config(format!("t = {t} exceeds t_max {}", config.t_max)));
    }
    let displacements: Vec<i64> = (0..config.n_runs as u64)
        .into_par_iter()
        .map(|r| second_class_displacement(config, r, t))
        .collect();
    let offsets = default_window(config.rho, t, config.ring_size);
    let n = displacements.len() as f64;
    let mut pmf = Vec::with_capacity(offsets.len());
    let mut stderr = Vec::with_capacity(offsets.len());
    for &j in &offsets {
        let p = displacements.iter().filter(|&&x| x == j).count() as f64 / n;
        pmf.push(p);
        stderr.push((p * (1.0 - p) / n).sqrt());
    }
    Ok(SecondClassEstimate { t, offsets, pmf, stderr, displacements })
}

/// Site j(w) = [(1 - 2 rho) t + 2 w chi^{1/3} t^{2/3}] (nearest integer)
/// and level 2m of the height event.
pub fn rescaled_location(rho: f64, t: f64, w: f64) -> Result<(i64, f64)> {
    let f = make_frame(rho, t, w, 0.0)?;
    Ok(((2.0 * f.d).round() as i64, 2.0 * f.m))
}

#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalFw {
    pub w: f64,
    pub site: i64,
    pub curve: DistributionCurve,
    /// H_t(w) at reference site 0, one per run.
    pub samples: Vec<f64>,
    /// E H_t(w) and E H_t(w)^2 averaged over all reference sites.
    pub mean: Moment,
    pub second_moment: Moment,
    /// Var H_t(w) = G_t(w).
    pub variance: Moment,
}

/// Rescaled height H_t(w) = (h_t(j(w)) - 2m) / (-2 chi^{2/3} t^{1/3}) and the
/// empirical F_w(s, t) = P(H_t(w) <= s).
pub fn empirical_fw(ens: &LatticeEnsemble, w: f64, s_grid: &[f64]) -> Result<EmpiricalFw> {
    if ens.runs.len() < MIN_RUNS {
        return Err(KpzError::Statistics(format!("{} runs < {MIN_RUNS}", ens.runs.len())));
    }
    let (site, level) = rescaled_location(ens.rho, ens.t, w)?;
    let chi = ens.chi();
    let scale = -2.0 * chi.powf(2.0 / 3.0) * ens.t.cbrt();
    let per_run: Vec<(f64, f64, f64)> = ens
        .runs
        .par_iter()
        .map(|run| {
            let hs = heights_at_offset(run, site);
            let rescaled = |h: i64| (h as f64 - level) / scale;
            let n = hs.len() as f64;
            let m1 = hs.iter().map(|&h| rescaled(h)).sum::<f64>() / n;
            let m2 = hs.iter().map(|&h| rescaled(h).powi(2)).sum::<f64>() / n;
            (rescaled(hs[0]), m1, m2)
        })
        .collect();
    let samples: Vec<f64> = per_run.iter().map(|p| p.0).collect();
    let m1: Vec<f64> = per_run.iter().map(|p| p.1).collect();
    let m2: Vec<f64> = per_run.iter().map(|p| p.2).collect();
    let mean = Moment::from_samples(&m1);
    let second_moment = Moment::from_samples(&m2);
    // per-run variance of the translation average; exact-mean centring is
    // unavailable here, so the run-level mean is subtracted
    let var_runs: Vec<f64> = m2.iter().map(|v| v - mean.value * mean.value).collect();
    let variance = Moment::from_samples(&var_runs);
    let curve = empirical_curve(&samples, s_grid);
    Ok(EmpiricalFw { w, site, curve, samples, mean, second_moment, variance })
}

/// h_t(x + site) - h_0(x) for every reference site x.
fn heights_at_offset(run: &RunRecord, site: i64) -> Vec<i64> {
    let n = run.initial.len() as i64;
    let inc: Vec<i64> = run.occupancy.iter().map(|&b| if b { -1 } else { 1 }).collect();
    // prefix over two laps so that windows never wrap twice
    let mut prefix = vec![0i64; 2 * n as usize + 1];
    for k in 0..2 * n as usize {
        prefix[k + 1] = prefix[k] + inc[k % n as usize];
    }
    let span = |a: i64, b: i64| -> i64 {
        // sum of inc over (a, b], a <= b, a in [0, n)
        prefix[(b + 1) as usize] - prefix[(a + 1) as usize]
    };
    (0..n)
        .map(|x| {
            let base = 2 * run.jumps[x as usize] as i64;
            if site >= 0 {
                base + span(x, x + site)
            } else {
                let start = (x + site).rem_euclid(n);
                let end = start + (-site);
                base - span(start, end)
            }
        })
        .collect()
}

fn empirical_curve(samples: &[f64], s_grid: &[f64]) -> DistributionCurve {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let cdf: Vec<f64> = s_grid.iter().map(|&s| sorted.partition_point(|&x| x <= s) as f64 / n).collect();
    let pdf = finite_difference_density(s_grid, &cdf);
    let moments: Vec<f64> = (0..=4).map(|k| sorted.iter().map(|x| x.powi(k)).sum::<f64>() / n).collect();
    let moment_errors: Vec<f64> = (0..=4)
        .map(|k| {
            let xs: Vec<f64> = sorted.iter().map(|x| x.powi(k)).collect();
            Moment::from_samples(&xs).stderr
        })
        .collect();
    DistributionCurve { s: s_grid.to_vec(), cdf, pdf, moments, moment_errors, quad_error: 0.0 }
}

fn finite_difference_density(s: &[f64], cdf: &[f64]) -> Vec<f64> {
    let n = s.len();
    (0..n)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
            if a == b {
                0.0
            } else {
                (cdf[b] - cdf[a]) / (s[b] - s[a])
            }
        })
        .collect()
}

/// Last-passage time to (plus, minus) with unit-rate bulk weights, rate
/// 1 - rho weights on the plus axis, rate rho on the minus axis and zero at
/// the corner. In TASEP terms: step initial data with an extra lead
/// particle of rate 1 - rho and a rate-rho source behind the last particle.
pub fn boundary_lpp_time(rho: f64, plus: usize, minus: usize, rng: &mut RunRng) -> f64 {
    let mut row = vec![0.0f64; minus + 1];
    for j in 1..=minus {
        row[j] = row[j - 1] + exp_holding(rng, rho);
    }
    for _ in 0..plus {
        row[0] += exp_holding(rng, 1.0 - rho);
        for j in 1..=minus {
            row[j] = row[j].max(row[j - 1]) + exp_holding(rng, 1.0);
        }
    }
    row[minus]
}

/// Empirical P(L <= u) for the boundary-weighted last-passage time.
pub fn boundary_lpp_cdf(
    rho: f64,
    plus: usize,
    minus: usize,
    u_grid: &[f64],
    n_runs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(KpzError::Config(format!("rho = {rho} outside (0, 1)")));
    }
    if n_runs < MIN_RUNS {
        return Err(KpzError::Config(format!("n_runs {n_runs} < {MIN_RUNS}")));
    }
    let times: Vec<f64> = (0..n_runs as u64)
        .into_par_iter()
        .map(|r| boundary_lpp_time(rho, plus, minus, &mut run_rng(seed, r, STREAM_LPP)))
        .collect();
    let n = times.len() as f64;
    Ok(u_grid.iter().map(|&u| times.iter().filter(|&&x| x <= u).count() as f64 / n).collect())
}

/// Dvoretzky-Kiefer-Wolfowitz half-width at confidence 1 - alpha.
pub fn dkw_epsilon(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct DominanceRow {
    pub site: i64,
    pub level: i64,
    pub p_stationary: f64,
    pub p_step: f64,
    pub stderr: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DominanceReport {
    pub t: f64,
    pub rows: Vec<DominanceRow>,
    /// Runs where h_stat > h_step at some tested site (the coupling forbids it).
    pub pathwise_violations: usize,
}

/// Stationary and step initial data driven by the same bond clocks (basic
/// coupling); P(h_t(j) >= level) compared on a (site, level) grid.
pub fn step_ic_dominance(config: &SimConfig, t: f64, sites: &[i64], levels: &[i64]) -> Result<DominanceReport> {
    config.validate()?;
    let n = config.ring_size;
    let per_run: Vec<(Vec<i64>, Vec<i64>)> = (0..config.n_runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut stat = init_stationary(config, r);
            let mut step = LatticeState::step(n);
            let mut rng = run_rng(config.seed, r, STREAM_COUPLED);
            let mut time = 0.0;
            loop {
                time += exp_holding(&mut rng, n as f64);
                if time > t {
                    break;
                }
                let i = rng.gen_range(0..n);
                let rr = (i + 1) % n;
                for s in [&mut stat, &mut step] {
                    if s.occupancy[i] && !s.occupancy[rr] {
                        s.time = time;
                        s.jump(i);
                    }
                }
            }
            let hs: Vec<i64> = sites.iter().map(|&j| stat.height(j)).collect();
            let hp: Vec<i64> = sites.iter().map(|&j| step.height(j)).collect();
            (hs, hp)
        })
        .collect();
    let runs = per_run.len() as f64;
    let pathwise_violations = per_run
        .iter()
        .filter(|(a, b)| a.iter().zip(b).any(|(x, y)| x > y))
        .count();
    let mut rows = Vec::new();
    for (k, &site) in sites.iter().enumerate() {
        for &level in levels {
            let ps = per_run.iter().filter(|(a, _)| a[k] >= level).count() as f64 / runs;
            let pp = per_run.iter().filter(|(_, b)| b[k] >= level).count() as f64 / runs;
            let stderr = ((ps * (1.0 - ps) + pp * (1.0 - pp)) / runs).sqrt();
            rows.push(DominanceRow {
                site,
                level,
                p_stationary: ps,
                p_step: pp,
                stderr,
                ok: ps - pp <= 3.0 * stderr,
            });
        }
    }
    Ok(DominanceReport { t, rows, pathwise_violations })
}

/// P(h^step_u(site) >= level) for u on a grid, from jump times across the bond.
pub fn step_passage_cdf(config: &SimConfig, site: i64, level: i64, u_grid: &[f64]) -> Result<Vec<f64>> {
    config.validate()?;
    let horizon = u_grid.iter().cloned().fold(0.0, f64::max);
    if horizon > config.t_max {
        return Err(KpzError::Config(format!("u = {horizon} exceeds t_max {}", config.t_max)));
    }
    let h0 = site.abs();
    if (level - h0) % 2 != 0 {
        return Err(KpzError::Domain(format!("level {level} and site {site} differ in parity")));
    }
    let k = (level - h0) / 2;
    let hit: Vec<f64> = (0..config.n_runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut state = LatticeState::step(config.ring_size);
            state.track_bond(site);
            let mut rng = dynamics_rng(config, r);
            let mut t_hit = f64::INFINITY;
            if k <= 0 {
                t_hit = 0.0;
            } else {
                // stop as soon as the k-th crossing is seen
                while state.crossings.len() < k as usize && state.time < horizon {
                    let next = (state.time + 1.0).min(horizon);
                    if evolve(&mut state, next, &mut rng).is_err() {
                        break;
                    }
                }
                if state.crossings.len() >= k as usize {
                    t_hit = state.crossings[k as usize - 1];
                }
            }
            t_hit
        })
        .collect();
    let n = hit.len() as f64;
    Ok(u_grid.iter().map(|&u| hit.iter().filter(|&&h| h <= u).count() as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairingEstimate {
    /// sum_j S(j, t) f(w_j).
    pub lhs: Moment,
    /// (chi/4) sum_w G_t(w) (f(w+delta) - 2f(w) + f(w-delta))/delta^2 delta.
    pub rhs: Moment,
    /// Per-run lhs - rhs.
    pub difference: Moment,
}

/// Both sides of the summation-by-parts pairing on the site grid
/// w_j = (j - (1 - 2 rho) t) delta, delta = 1/(2 chi^{1/3} t^{2/3}).
pub fn weak_pairing(ens: &LatticeEnsemble, f: &(dyn Fn(f64) -> f64 + Sync)) -> Result<PairingEstimate> {
    if ens.runs.len() < MIN_RUNS {
        return Err(KpzError::Statistics(format!("{} runs < {MIN_RUNS}", ens.runs.len())));
    }
    let chi = ens.chi();
    let delta = 1.0 / (2.0 * chi.cbrt() * ens.t.powf(2.0 / 3.0));
    let drift = (1.0 - 2.0 * ens.rho) * ens.t;
    let offsets = default_window(ens.rho, ens.t, ens.ring_size);
    let wj = |j: i64| (j as f64 - drift) * delta;
    let fv: Vec<f64> = offsets.iter().map(|&j| f(wj(j))).collect();
    let lap: Vec<f64> = offsets.iter().map(|&j| f(wj(j - 1)) - 2.0 * f(wj(j)) + f(wj(j + 1))).collect();
    let (lo, hi) = (offsets[0], offsets[offsets.len() - 1]);
    let per_run: Vec<(f64, f64)> = ens
        .runs
        .par_iter()
        .map(|r| {
            let s = per_run_s(r, ens.rho, &offsets);
            let v = per_run_height_var(r, ens.rho, ens.t, lo, hi);
            let lhs: f64 = s.iter().zip(&fv).map(|(a, b)| a * b).sum();
            let rhs: f64 = v.iter().zip(&lap).map(|(a, b)| a * b).sum::<f64>() / 8.0;
            (lhs, rhs)
        })
        .collect();
    let l: Vec<f64> = per_run.iter().map(|p| p.0).collect();
    let r: Vec<f64> = per_run.iter().map(|p| p.1).collect();
    let d: Vec<f64> = per_run.iter().map(|p| p.0 - p.1).collect();
    Ok(PairingEstimate {
        lhs: Moment::from_samples(&l),
        rhs: Moment::from_samples(&r),
        difference: Moment::from_samples(&d),
    })
}

const RECORD_MAGIC: &[u8; 8] = b"KPZRUNS1";

/// Binary run records: magic, header (seed, ring size, run count as u64;
/// rho, t as f64; all little-endian), then per run the occupancy at 0 and
/// at t as one byte per site and N_t as u64 per bond.
pub fn write_run_records<W: Write>(ens: &LatticeEnsemble, mut out: W) -> Result<()> {
    out.write_all(RECORD_MAGIC)?;
    for v in [ens.seed, ens.ring_size as u64, ens.runs.len() as u64] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in [ens.rho, ens.t] {
        out.write_all(&v.to_le_bytes())?;
    }
    let bytes = |v: &[bool]| v.iter().map(|&b| b as u8).collect::<Vec<u8>>();
    for run in &ens.runs {
        out.write_all(&bytes(&run.initial))?;
        out.write_all(&bytes(&run.occupancy))?;
        for c in &run.jumps {
            out.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_run_records<R: Read>(mut input: R) -> Result<LatticeEnsemble> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != RECORD_MAGIC {
        return Err(KpzError::Config("not a run-record file".into()));
    }
    let mut b8 = [0u8; 8];
    let mut word = |inp: &mut R| -> Result<u64> {
        inp.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let seed = word(&mut input)?;
    let ring_size = word(&mut input)? as usize;
    let count = word(&mut input)? as usize;
    let rho = f64::from_bits(word(&mut input)?);
    let t = f64::from_bits(word(&mut input)?);
    let mut runs = Vec::with_capacity(count);
    let mut occ = vec![0u8; ring_size];
    for _ in 0..count {
        input.read_exact(&mut occ)?;
        let initial = occ.iter().map(|&b| b == 1).collect();
        input.read_exact(&mut occ)?;
        let occupancy = occ.iter().map(|&b| b == 1).collect();
        let jumps = (0..ring_size).map(|_| word(&mut input)).collect::<Result<Vec<u64>>>()?;
        runs.push(RunRecord { initial, occupancy, jumps });
    }
    Ok(LatticeEnsemble { rho, t, ring_size, seed, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn active_set_tracks_membership() {
        let mut a = ActiveSet::new(10);
        for i in [3, 5, 7] {
            a.set(i, true);
        }
        a.set(5, false);
        a.set(3, true);
        let mut v = a.list.clone();
        v.sort();
        assert_eq!(v, vec![3, 7]);
        assert_eq!(a.slot[7] as usize, a.list.iter().position(|&x| x == 7).unwrap());
    }

    #[test]
    fn packed_ring_is_frozen() {
        let mut s = LatticeState::from_occupancy(vec![true; 20]);
        let mut rng = run_rng(1, 0, 0);
        evolve(&mut s, 5.0, &mut rng).unwrap();
        assert_eq!(s.time, 5.0);
        assert!(s.jump_counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn step_heights_are_abs() {
        let s = LatticeState::step(40);
        for j in -10..=10 {
            assert_eq!(s.height(j), j.abs());
        }
    }

    #[test]
    fn jump_raises_height_by_two() {
        let mut s = LatticeState::from_occupancy(vec![true, false, true, false, false, true, false, false]);
        let before: Vec<i64> = (-3..=3).map(|j| s.height(j)).collect();
        s.jump(2);
        let after: Vec<i64> = (-3..=3).map(|j| s.height(j)).collect();
        for (k, j) in (-3..=3).enumerate() {
            let expect = if j == 2 { 2 } else { 0 };
            assert_eq!(after[k] - before[k], expect, "j = {j}");
        }
    }

    #[test]
    fn offset_heights_match_direct_sum() {
        let cfg = SimConfig::new(0.4, 5.0, 100, 9).unwrap();
        let mut s = init_stationary(&cfg, 3);
        let initial = s.occupancy.clone();
        evolve(&mut s, 5.0, &mut dynamics_rng(&cfg, 3)).unwrap();
        let run = RunRecord { initial, occupancy: s.occupancy.clone(), jumps: s.jump_counts.clone() };
        for site in [-7i64, -1, 0, 4, 11] {
            let hs = heights_at_offset(&run, site);
            for x in [0i64, 5, 17, cfg.ring_size as i64 - 1] {
                assert_eq!(hs[x as usize], s.height_from(x, site));
            }
        }
    }
}
