//! Exact finite-time formulas for the stationary height: the scaled frame,
//! the contour kernels L, R, K_{m,d}, F(u), G_0 = g1 + g2 + g3, the
//! finite-time distribution F_w(s, t) and trace diagnostics.
//!
//! The frame keeps m and d real. Contour integrands carry the powers m + d
//! and m - d, which are single-valued only for integers, so every contour
//! quantity is evaluated at the lattice point nearest to (2d, 2m) with
//! matching parity (see [`LatticePoint`]).

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;

use crate::airy_limit::{stencil_derivatives, DistributionCurve, DIFF_STEP, STENCIL};
use crate::error::{KpzError, Result};
use crate::fredholm::{
    build_semi_infinite_rule, det_and_adjugate_form, fredholm_det, operator_trace,
    resolvent_solve, NystromSystem, QuadratureRule, DEFAULT_NODES,
};

type C = Complex<f64>;

pub const CONTOUR_POINTS: usize = 512;
/// Radii are clamped to [RADIUS_MIN, RADIUS_MAX] so that each circle keeps
/// the other pole (0 or 1) outside.
const RADIUS_MIN: f64 = 0.05;
const RADIUS_MAX: f64 = 0.95;
/// Largest admissible r0 + r1 for the double-contour pair.
const PAIR_GAP: f64 = 0.98;
const LOG_OVERFLOW: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledFrame {
    pub rho: f64,
    pub t: f64,
    pub w: f64,
    pub s: f64,
    pub chi: f64,
    pub m: f64,
    pub d: f64,
    pub a: f64,
    pub u: f64,
}

/// Integer site j = 2d and level 2m, with m + d and m - d integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticePoint {
    pub site: i64,
    pub level: i64,
}

impl LatticePoint {
    /// m + d.
    pub fn plus(&self) -> i64 {
        (self.level + self.site) / 2
    }

    /// m - d.
    pub fn minus(&self) -> i64 {
        (self.level - self.site) / 2
    }
}

pub fn make_frame(rho: f64, t: f64, w: f64, s: f64) -> Result<ScaledFrame> {
    if !(rho > 0.05 && rho < 0.95) {
        return Err(KpzError::Config(format!("rho = {rho} outside (0.05, 0.95)")));
    }
    if !(t >= 10.0 && t.is_finite()) {
        return Err(KpzError::Config(format!("t = {t} must be finite and >= 10")));
    }
    if !(w.is_finite() && s.is_finite()) {
        return Err(KpzError::Config("w and s must be finite".into()));
    }
    let chi = rho * (1.0 - rho);
    let c13 = chi.cbrt();
    let t23 = t.powf(2.0 / 3.0);
    let m = 0.5 * ((1.0 - 2.0 * chi) * t + 2.0 * w * (1.0 - 2.0 * rho) * c13 * t23);
    let d = 0.5 * ((1.0 - 2.0 * rho) * t + 2.0 * w * c13 * t23);
    let u = t + s * t.cbrt() / c13;
    if m - d < 1.0 || m + d <= 0.0 {
        return Err(KpzError::Config(format!("m - d = {} must be >= 1", m - d)));
    }
    Ok(ScaledFrame { rho, t, w, s, chi, m, d, a: 0.5 - rho, u })
}

impl ScaledFrame {
    /// (t/chi)^{1/3}.
    pub fn scale(&self) -> f64 {
        (self.t / self.chi).cbrt()
    }

    pub fn with_s(&self, s: f64) -> Result<ScaledFrame> {
        make_frame(self.rho, self.t, self.w, s)
    }

    pub fn lattice(&self) -> LatticePoint {
        let site = (2.0 * self.d).round() as i64;
        let half = ((2.0 * self.m - site as f64) / 2.0).round() as i64;
        LatticePoint { site, level: site + 2 * half }
    }

    /// u moved along with the lattice rounding so that g1 is unchanged:
    /// the lattice point sees the same s as the real frame.
    pub fn lattice_u(&self) -> f64 {
        let lp = self.lattice();
        let (m, d) = (lp.level as f64 / 2.0, lp.site as f64 / 2.0);
        let two_a = 2.0 * self.a;
        self.u + ((two_a * self.d - self.m) - (two_a * d - m)) / self.chi
    }

    fn counts(&self) -> Result<(f64, f64)> {
        let lp = self.lattice();
        if lp.minus() < 1 || lp.plus() < 1 {
            return Err(KpzError::Domain(format!("lattice point {lp:?} has m - d < 1")));
        }
        Ok((lp.plus() as f64, lp.minus() as f64))
    }

    fn log_z(&self) -> Result<f64> {
        let (np, nm) = self.counts()?;
        Ok(np * (1.0 - self.rho).ln() - nm * self.rho.ln())
    }

    fn check_u(&self) -> Result<()> {
        if self.lattice_u() > 0.0 {
            Ok(())
        } else {
            Err(KpzError::Domain(format!("u = {} must be positive", self.lattice_u())))
        }
    }
}

/// g1(u) = u + (2ad - m)/(1/4 - a^2) with the real (m, d) of the frame,
/// checked against s (t/chi)^{1/3}.
pub fn g1(frame: &ScaledFrame) -> Result<f64> {
    let den = 0.25 - frame.a * frame.a;
    if den == 0.0 {
        return Err(KpzError::Domain("a^2 = 1/4".into()));
    }
    let g = frame.u + (2.0 * frame.a * frame.d - frame.m) / den;
    let target = frame.s * frame.scale();
    if (g - target).abs() > 1e-9 * g.abs().max(1.0) {
        return Err(KpzError::Consistency(format!("g1 = {g} but s (t/chi)^(1/3) = {target}")));
    }
    Ok(g)
}

/// The same expression at the lattice point and [`ScaledFrame::lattice_u`];
/// equal to [`g1`] up to rounding.
pub fn lattice_g1(frame: &ScaledFrame) -> Result<f64> {
    let lp = frame.lattice();
    let (m, d) = (lp.level as f64 / 2.0, lp.site as f64 / 2.0);
    Ok(frame.lattice_u() + (2.0 * frame.a * d - m) / frame.chi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourSpec {
    pub center: f64,
    pub radius: f64,
    pub n_points: usize,
}

impl ContourSpec {
    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) || self.n_points < 8 {
            return Err(KpzError::Config(format!("bad contour {self:?}")));
        }
        Ok(())
    }

    fn node(&self, k: usize) -> (C, f64) {
        let th = 2.0 * std::f64::consts::PI * k as f64 / self.n_points as f64;
        (C::new(self.center + self.radius * th.cos(), self.radius * th.sin()), th)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceAnalysis {
    pub gamma: f64,
    pub u_prime: f64,
    pub big_m: f64,
    pub zc_plus: C,
    pub zc_minus: C,
    pub trace_value: Option<f64>,
}

/// Roots of F_u'(z) = u' - 1/z - gamma/(1 - z).
pub fn critical_points_at(u_prime: f64, gamma: f64) -> (C, C) {
    let sg = gamma.sqrt();
    let b = u_prime + 1.0 - gamma;
    let disc = (u_prime - (1.0 + sg).powi(2)) * (u_prime - (1.0 - sg).powi(2));
    let den = 2.0 * u_prime;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (C::new((b + r) / den, 0.0), C::new((b - r) / den, 0.0))
    } else {
        let r = (-disc).sqrt();
        (C::new(b / den, r / den), C::new(b / den, -r / den))
    }
}

pub fn critical_points(frame: &ScaledFrame) -> Result<TraceAnalysis> {
    frame.check_u()?;
    let (np, nm) = frame.counts()?;
    let gamma = np / nm;
    let u_prime = frame.lattice_u() / nm;
    let (zc_plus, zc_minus) = critical_points_at(u_prime, gamma);
    Ok(TraceAnalysis { gamma, u_prime, big_m: nm, zc_plus, zc_minus, trace_value: None })
}

/// Steep-descent radii (around 0, around 1), clamped to keep the far pole
/// outside. Outside the bulk window the roots are real and the circles
/// cross the axis at the smaller (around 0) and larger (around 1) root.
fn radii_at(u_prime: f64, gamma: f64) -> (f64, f64) {
    let (zp, zm) = critical_points_at(u_prime, gamma);
    let (r0, r1) = if zp.im != 0.0 {
        (zp.norm(), (C::new(1.0, 0.0) - zp).norm())
    } else {
        (zm.re.abs(), (1.0 - zp.re).abs())
    };
    (r0.clamp(RADIUS_MIN, RADIUS_MAX), r1.clamp(RADIUS_MIN, RADIUS_MAX))
}

/// Circles around 0 and 1 for the trace formula, shrunk proportionally
/// when the steep-descent radii would make them touch.
pub fn contour_pair(analysis: &TraceAnalysis, n_points: usize) -> (ContourSpec, ContourSpec) {
    let (mut r0, mut r1) = radii_at(analysis.u_prime, analysis.gamma);
    if r0 + r1 > PAIR_GAP {
        let k = PAIR_GAP / (r0 + r1);
        r0 *= k;
        r1 *= k;
    }
    (
        ContourSpec { center: 0.0, radius: r0, n_points },
        ContourSpec { center: 1.0, radius: r1, n_points },
    )
}

/// Trapezoid sums of (1/2 pi i) \oint exp(base(z) + lin z + offset) dz with
/// base(z) pre-evaluated on the nodes.
struct PreparedContour {
    z: Vec<C>,
    log_w: Vec<C>,
}

impl Prepared {
    fn empty() -> Self {
        Prepared { radius: f64::NAN, contour: PreparedContour { z: Vec::new(), log_w: Vec::new() } }
    }
}

impl PreparedContour {
    fn new(spec: &ContourSpec, base: impl Fn(C) -> C) -> Result<Self> {
        spec.validate()?;
        let lr = spec.radius.ln();
        let mut z = Vec::with_capacity(spec.n_points);
        let mut log_w = Vec::with_capacity(spec.n_points);
        for k in 0..spec.n_points {
            let (zk, th) = spec.node(k);
            z.push(zk);
            log_w.push(base(zk) + C::new(lr, th));
        }
        Ok(PreparedContour { z, log_w })
    }

    fn eval(&self, lin: f64, offset: f64) -> Result<C> {
        self.eval_with(lin, offset, |_| C::new(1.0, 0.0))
    }

    /// Same with an extra factor extra(z) that is O(1) on the contour.
    fn eval_with(&self, lin: f64, offset: f64, extra: impl Fn(C) -> C) -> Result<C> {
        let mx = self
            .log_w
            .iter()
            .zip(&self.z)
            .map(|(l, z)| l.re + lin * z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut acc = C::new(0.0, 0.0);
        for (l, z) in self.log_w.iter().zip(&self.z) {
            let e = l + z * lin;
            acc += C::from_polar((e.re - mx).exp(), e.im) * extra(*z);
        }
        let n = self.z.len() as f64;
        let mag = acc.norm() / n;
        if mag == 0.0 {
            return Ok(C::new(0.0, 0.0));
        }
        let log_mag = mx + offset + mag.ln();
        if !log_mag.is_finite() || log_mag > LOG_OVERFLOW {
            return Err(KpzError::Numeric(format!("contour sum overflows (log {log_mag})")));
        }
        Ok(acc / n * (mx + offset).exp())
    }
}

fn circle_around_one(frame: &ScaledFrame, x: f64, n_points: usize) -> Result<ContourSpec> {
    let (np, nm) = frame.counts()?;
    let (_, r1) = radii_at(x / nm, np / nm);
    Ok(ContourSpec { center: 1.0, radius: r1, n_points })
}

fn circle_around_zero(frame: &ScaledFrame, x: f64, n_points: usize) -> Result<ContourSpec> {
    let (np, nm) = frame.counts()?;
    let (r0, _) = radii_at(x / nm, np / nm);
    Ok(ContourSpec { center: 0.0, radius: r0, n_points })
}

/// L(x, y) for x > y, on the circle around 1 - rho (shifted variable
/// zeta = z + rho, so the circle is centred at 1).
pub fn kernel_l(frame: &ScaledFrame, x: f64, y: f64) -> Result<f64> {
    kernel_l_points(frame, x, y, CONTOUR_POINTS)
}

pub fn kernel_l_points(frame: &ScaledFrame, x: f64, y: f64, n_points: usize) -> Result<f64> {
    if !(x > y) {
        return Err(KpzError::Domain(format!("L(x, y) needs x > y, got ({x}, {y})")));
    }
    let (np, nm) = frame.counts()?;
    let gap = x - y;
    let spec = circle_around_one(frame, gap, n_points)?;
    let prep = PreparedContour::new(&spec, |z| nm * z.ln() - np * (1.0 - z).ln())?;
    Ok(-prep.eval(-gap, 0.5 * gap)?.re)
}

/// R(x, y) for x < y, on the circle around -rho (centred at 0 after the shift).
pub fn kernel_r(frame: &ScaledFrame, x: f64, y: f64) -> Result<f64> {
    kernel_r_points(frame, x, y, CONTOUR_POINTS)
}

pub fn kernel_r_points(frame: &ScaledFrame, x: f64, y: f64, n_points: usize) -> Result<f64> {
    if !(x < y) {
        return Err(KpzError::Domain(format!("R(x, y) needs x < y, got ({x}, {y})")));
    }
    let (np, nm) = frame.counts()?;
    let gap = y - x;
    let spec = circle_around_zero(frame, gap, n_points)?;
    let prep = PreparedContour::new(&spec, |z| np * (1.0 - z).ln() - nm * z.ln())?;
    Ok(prep.eval(gap, -0.5 * gap)?.re)
}

/// Imaginary part of the L contour sum relative to its real part.
pub fn kernel_l_imaginary_residue(frame: &ScaledFrame, x: f64, y: f64) -> Result<f64> {
    let (np, nm) = frame.counts()?;
    let gap = x - y;
    let spec = circle_around_one(frame, gap, CONTOUR_POINTS)?;
    let prep = PreparedContour::new(&spec, |z| nm * z.ln() - np * (1.0 - z).ln())?;
    let v = prep.eval(-gap, 0.5 * gap)?;
    Ok(v.im.abs() / v.re.abs().max(f64::MIN_POSITIVE))
}

/// K_{m,d}(x, y) = int_{-inf}^0 L(x, z) R(z, y) dz.
pub fn kernel_k_md(frame: &ScaledFrame, x: f64, y: f64) -> Result<f64> {
    kernel_k_md_with(frame, x, y, DEFAULT_NODES)
}

pub fn kernel_k_md_with(frame: &ScaledFrame, x: f64, y: f64, n_quad: usize) -> Result<f64> {
    if !(x > 0.0 && y > 0.0) {
        return Err(KpzError::Domain(format!("K_md needs x, y > 0, got ({x}, {y})")));
    }
    let rule = build_semi_infinite_rule(0.0, n_quad, 4.0)?;
    let mut acc = 0.0;
    for (v, wt) in rule.nodes.iter().zip(&rule.weights) {
        acc += wt * kernel_l(frame, x, -v)? * kernel_r(frame, -v, y)?;
    }
    Ok(acc)
}

/// Orthonormal Laguerre functions
/// phi_k(x) = sqrt(k!/Gamma(k+alpha+1)) L_k^alpha(x) x^{alpha/2} e^{-x/2},
/// k < count, as the rows of the result.
pub fn laguerre_functions(xs: &[f64], count: usize, alpha: u32) -> DMatrix<f64> {
    let al = alpha as f64;
    let lgam: f64 = (1..=alpha).map(|k| (k as f64).ln()).sum();
    let mut out = DMatrix::zeros(count, xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let mut log_scale = 0.5 * (al * x.ln() - x - lgam);
        let mut prev = 0.0;
        let mut cur = 1.0;
        for k in 0..count {
            out[(k, i)] = cur * log_scale.exp();
            let kf = k as f64;
            let next = if k == 0 {
                (1.0 + al - x) / (1.0 + al).sqrt() * cur
            } else {
                ((2.0 * kf + 1.0 + al - x) * cur - (kf * (kf + al)).sqrt() * prev)
                    / ((kf + 1.0) * (kf + 1.0 + al)).sqrt()
            };
            prev = cur;
            cur = next;
            if cur.abs() > 1e150 {
                prev *= 1e-150;
                cur *= 1e-150;
                log_scale += 150.0 * std::f64::consts::LN_10;
            }
        }
    }
    out
}

/// Laguerre-ensemble form of the kernel: K_{m,d}(x, y) = (x/y)^{(N-M)/2} K_LUE(x, y)
/// with N = m + d, M = m - d and K_LUE built on min(N, M) functions with
/// alpha = |N - M|.
pub fn kernel_lue(frame: &ScaledFrame, x: f64, y: f64) -> Result<f64> {
    let lp = frame.lattice();
    let (count, alpha) = lue_shape(lp)?;
    let phi = laguerre_functions(&[x, y], count, alpha);
    Ok(phi.column(0).dot(&phi.column(1)))
}

fn lue_shape(lp: LatticePoint) -> Result<(usize, u32)> {
    if lp.minus() < 1 || lp.plus() < 1 {
        return Err(KpzError::Domain(format!("lattice point {lp:?} has m - d < 1")));
    }
    Ok((lp.plus().min(lp.minus()) as usize, (lp.plus() - lp.minus()).unsigned_abs() as u32))
}

/// Nyström discretization of P_u K_{m,d} P_u in the scaled variable
/// x = u + (t/chi)^{1/3} y, y >= 0, through the symmetric Laguerre form.
#[derive(Debug, Clone)]
pub struct FiniteOperator {
    pub frame: ScaledFrame,
    pub system: NystromSystem,
    /// Unscaled positions u + sigma y_i.
    pub positions: Vec<f64>,
    /// Exponent (N - M)/2 of the conjugation x^{(N-M)/2}.
    pub half_alpha: f64,
    /// Nodes below the cut where the Laguerre kernel still carries weight;
    /// the exponential conjugation is only formed there.
    pub active: Vec<bool>,
}

/// Map scale of the y-rule: wide enough to reach the soft edge from deep
/// in the lower tail.
pub fn default_map_scale(s: f64) -> f64 {
    4.0_f64.max(1.0 - s)
}

impl FiniteOperator {
    pub fn new(frame: &ScaledFrame, n_quad: usize, map_scale: f64) -> Result<Self> {
        frame.check_u()?;
        let lp = frame.lattice();
        let (count, alpha) = lue_shape(lp)?;
        let sigma = frame.scale();
        let rule = build_semi_infinite_rule(0.0, n_quad, map_scale)?;
        let positions: Vec<f64> = rule.nodes.iter().map(|y| frame.lattice_u() + sigma * y).collect();
        let phi = laguerre_functions(&positions, count, alpha);
        let gram = phi.transpose() * &phi;
        let sw: Vec<f64> = rule.weights.iter().map(|w| (w * sigma).sqrt()).collect();
        let n = rule.len();
        let matrix = DMatrix::from_fn(n, n, |i, j| sw[i] * gram[(i, j)] * sw[j]);
        let half_alpha = (lp.plus() - lp.minus()) as f64 / 2.0;
        let edge = ((lp.plus() as f64).sqrt() + (lp.minus() as f64).sqrt()).powi(2);
        let cut = 2.0 * edge + 50.0;
        let active = positions.iter().map(|x| *x <= cut).collect();
        Ok(FiniteOperator {
            frame: *frame,
            system: NystromSystem { rule, left_endpoint: 0.0, matrix },
            positions,
            half_alpha,
            active,
        })
    }

    pub fn det(&self) -> Result<f64> {
        fredholm_det(&self.system)
    }

    pub fn trace(&self) -> Result<f64> {
        operator_trace(&self.system)
    }

    /// Diagonal conjugation D_i with K_t = D (sigma K_LUE) D^{-1}.
    fn conjugation(&self) -> Vec<f64> {
        let f = &self.frame;
        let c = f.w + f.a * f.scale();
        let lu = f.lattice_u();
        self.system
            .rule
            .nodes
            .iter()
            .zip(&self.positions)
            .zip(&self.active)
            .map(|((y, x), on)| if *on { (-c * y + self.half_alpha * (x / lu).ln()).exp() } else { 1.0 })
            .collect()
    }

    /// K_t(y_i, y_j) on the rule nodes.
    pub fn k_t_matrix(&self) -> DMatrix<f64> {
        let d = self.conjugation();
        let wts = &self.system.rule.weights;
        let n = d.len();
        DMatrix::from_fn(n, n, |i, j| {
            if self.active[i] && self.active[j] {
                d[i] * self.system.matrix[(i, j)] / (wts[i] * wts[j]).sqrt() / d[j]
            } else {
                0.0
            }
        })
    }
}

#[allow(non_snake_case)]
pub fn finite_F(frame: &ScaledFrame) -> Result<f64> {
    finite_F_with(frame, DEFAULT_NODES, default_map_scale(frame.s))
}

#[allow(non_snake_case)]
pub fn finite_F_with(frame: &ScaledFrame, n_quad: usize, map_scale: f64) -> Result<f64> {
    FiniteOperator::new(frame, n_quad, map_scale)?.det()
}

/// Diagonal trace of P_u K_{m,d} P_u.
pub fn finite_trace(frame: &ScaledFrame) -> Result<f64> {
    FiniteOperator::new(frame, DEFAULT_NODES, default_map_scale(frame.s))?.trace()
}

/// H_t, H~_t and their tails. Contours are prepared once for X = u and
/// rebuilt for arguments whose steep-descent radius differs noticeably.
pub struct HFunctions {
    frame: ScaledFrame,
    sigma: f64,
    log_z: f64,
    counts: (f64, f64),
    n_points: usize,
    near: [Prepared; 4],
}

struct Prepared {
    radius: f64,
    contour: PreparedContour,
}

#[derive(Clone, Copy)]
enum Circle {
    One,
    Zero,
    OneTail,
    ZeroTail,
}

const RADIUS_REUSE: f64 = 0.01;

impl HFunctions {
    pub fn new(frame: &ScaledFrame, n_points: usize) -> Result<Self> {
        frame.check_u()?;
        let (np, nm) = frame.counts()?;
        let mut hf = HFunctions {
            frame: *frame,
            sigma: frame.scale(),
            log_z: frame.log_z()?,
            counts: (np, nm),
            n_points,
            near: [Prepared::empty(), Prepared::empty(), Prepared::empty(), Prepared::empty()],
        };
        for (slot, c) in [Circle::One, Circle::Zero, Circle::OneTail, Circle::ZeroTail].into_iter().enumerate() {
            let r = hf.radius(c, frame.lattice_u());
            hf.near[slot] = Prepared { radius: r, contour: hf.build(c, r)? };
        }
        Ok(hf)
    }

    /// Distance from rho below which a tail circle is pushed off the pole:
    /// the cubic scale of the exponent at rho.
    fn pole_gap(&self) -> f64 {
        let (np, nm) = self.counts;
        let rho = self.frame.rho;
        let third = 2.0 * nm / rho.powi(3) + 2.0 * np / (1.0 - rho).powi(3);
        (6.0 / third).cbrt()
    }

    fn radius(&self, c: Circle, big_x: f64) -> f64 {
        let (np, nm) = self.counts;
        let (r0, r1) = radii_at(big_x / nm, np / nm);
        let rho = self.frame.rho;
        let push = |cross: f64| {
            let gap = self.pole_gap();
            if (cross - rho).abs() >= gap {
                cross
            } else if cross >= rho {
                rho + gap
            } else {
                rho - gap
            }
        };
        match c {
            Circle::One => r1,
            Circle::Zero => r0,
            Circle::OneTail => (1.0 - push(1.0 - r1)).clamp(RADIUS_MIN, RADIUS_MAX),
            Circle::ZeroTail => push(r0).clamp(RADIUS_MIN, RADIUS_MAX),
        }
    }

    fn build(&self, c: Circle, radius: f64) -> Result<PreparedContour> {
        let (np, nm) = self.counts;
        let n_points = self.n_points;
        match c {
            Circle::One | Circle::OneTail => PreparedContour::new(
                &ContourSpec { center: 1.0, radius, n_points },
                |z| nm * z.ln() - np * (1.0 - z).ln(),
            ),
            Circle::Zero | Circle::ZeroTail => PreparedContour::new(
                &ContourSpec { center: 0.0, radius, n_points },
                |z| np * (1.0 - z).ln() - nm * z.ln(),
            ),
        }
    }

    /// Contour sum for circle c at argument X, with the pole term removed
    /// for tail circles that enclose rho.
    fn sum(&self, c: Circle, big_x: f64, lin: f64, offset: f64, extra: impl Fn(C) -> C) -> Result<(C, bool)> {
        let r = self.radius(c, big_x);
        let slot = c as usize;
        let near = &self.near[slot];
        let v = if (r - near.radius).abs() <= RADIUS_REUSE {
            (near.contour.eval_with(lin, offset, extra)?, near.radius)
        } else {
            (self.build(c, r)?.eval_with(lin, offset, extra)?, r)
        };
        let rho = self.frame.rho;
        let encloses = match c {
            Circle::One | Circle::OneTail => 1.0 - v.1 < rho,
            Circle::Zero | Circle::ZeroTail => v.1 > rho,
        };
        Ok((v.0, encloses))
    }

    /// H_t(y) = sigma calH_t(sigma y), defined for every real y.
    pub fn h(&self, y: f64) -> Result<f64> {
        let big_x = self.frame.lattice_u() + self.sigma * y;
        let rho = self.frame.rho;
        let (v, _) = self.sum(Circle::One, big_x, -big_x, self.log_z + rho * big_x, |_| C::new(1.0, 0.0))?;
        Ok(-self.sigma * v.re)
    }

    pub fn h_tilde(&self, y: f64) -> Result<f64> {
        let big_x = self.frame.lattice_u() + self.sigma * y;
        let rho = self.frame.rho;
        let (v, _) = self.sum(Circle::Zero, big_x, big_x, -self.log_z - rho * big_x, |_| C::new(1.0, 0.0))?;
        Ok(self.sigma * v.re)
    }

    /// int_y^inf H_t.
    pub fn h_tail(&self, y: f64) -> Result<f64> {
        let big_x = self.frame.lattice_u() + self.sigma * y;
        let rho = self.frame.rho;
        let (v, encloses) =
            self.sum(Circle::OneTail, big_x, -big_x, self.log_z + rho * big_x, |z| (z - rho).inv())?;
        // Z times the residue at zeta = rho is 1
        Ok(-v.re + if encloses { 1.0 } else { 0.0 })
    }

    /// int_y^inf H~_t.
    pub fn h_tilde_tail(&self, y: f64) -> Result<f64> {
        let big_x = self.frame.lattice_u() + self.sigma * y;
        let rho = self.frame.rho;
        let (v, encloses) =
            self.sum(Circle::ZeroTail, big_x, big_x, -self.log_z - rho * big_x, |z| (z - rho).inv())?;
        Ok(-v.re + if encloses { 1.0 } else { 0.0 })
    }

    /// g2(u) = int_{R_+^2} calH_t(x + y) dx dy in closed contour form.
    pub fn g2_closed(&self) -> Result<f64> {
        let u = self.frame.lattice_u();
        let rho = self.frame.rho;
        let (v, encloses) =
            self.sum(Circle::OneTail, u, -u, self.log_z + rho * u, |z| (z - rho).powi(-2))?;
        let mut val = -v.re;
        if encloses {
            // Z Res = -u + M/rho + N/(1-rho), i.e. -g1 at the lattice point
            let (np, nm) = self.counts;
            val -= u - nm / rho - np / (1.0 - rho);
        }
        Ok(val)
    }
}

pub fn h_t(frame: &ScaledFrame, y: f64) -> Result<f64> {
    nonnegative(y)?;
    HFunctions::new(frame, CONTOUR_POINTS)?.h(y)
}

pub fn h_tilde_t(frame: &ScaledFrame, y: f64) -> Result<f64> {
    nonnegative(y)?;
    HFunctions::new(frame, CONTOUR_POINTS)?.h_tilde(y)
}

fn nonnegative(y: f64) -> Result<()> {
    if y >= 0.0 {
        Ok(())
    } else {
        Err(KpzError::Domain(format!("y = {y} must be >= 0")))
    }
}

fn positive_w(frame: &ScaledFrame) -> Result<()> {
    if frame.w > 0.0 {
        Ok(())
    } else {
        Err(KpzError::Unsupported(format!(
            "finite-time G_0 is implemented for w > 0 only, got w = {}",
            frame.w
        )))
    }
}

/// Map scale for rules carrying H_t: its mass sits on y + s >~ -|s|.
fn h_map_scale(s: f64) -> f64 {
    2.0_f64.max(1.0 - s)
}

/// g2(u) = (t/chi)^{1/3} int_0^inf y H_t(y) dy.
pub fn g2(frame: &ScaledFrame) -> Result<f64> {
    g2_with(frame, DEFAULT_NODES)
}

pub fn g2_with(frame: &ScaledFrame, n_quad: usize) -> Result<f64> {
    positive_w(frame)?;
    let hf = HFunctions::new(frame, CONTOUR_POINTS)?;
    let rule = build_semi_infinite_rule(0.0, n_quad, h_map_scale(frame.s))?;
    let mut acc = 0.0;
    for (y, wt) in rule.nodes.iter().zip(&rule.weights) {
        acc += wt * y * hf.h(*y)?;
    }
    Ok(frame.scale() * acc)
}

/// Tensor-product oracle for g2: sigma int int H_t(x + y) dx dy.
pub fn g2_tensor(frame: &ScaledFrame, n_quad: usize) -> Result<f64> {
    positive_w(frame)?;
    let hf = HFunctions::new(frame, CONTOUR_POINTS)?;
    let rule = build_semi_infinite_rule(0.0, n_quad, h_map_scale(frame.s))?;
    let mut acc = 0.0;
    for (x, wx) in rule.nodes.iter().zip(&rule.weights) {
        for (y, wy) in rule.nodes.iter().zip(&rule.weights) {
            acc += wx * wy * hf.h(x + y)?;
        }
    }
    Ok(frame.scale() * acc)
}

/// Samples of Phi_t and Psi_t on the operator nodes together with K_t.
struct G3Data {
    op: FiniteOperator,
    k_t: DMatrix<f64>,
    phi: Vec<f64>,
    psi: Vec<f64>,
}

fn g3_data(frame: &ScaledFrame, n_quad: usize, n_points: usize) -> Result<G3Data> {
    positive_w(frame)?;
    let op = FiniteOperator::new(frame, n_quad, default_map_scale(frame.s))?;
    let hf = HFunctions::new(frame, n_points)?;
    let w = frame.w;
    let nodes = op.system.rule.nodes.clone();
    let wts = op.system.rule.weights.clone();
    let k_t = op.k_t_matrix();
    let mut psi = Vec::with_capacity(nodes.len());
    let mut phi = Vec::with_capacity(nodes.len());
    for (i, &y) in nodes.iter().enumerate() {
        if !op.active[i] {
            psi.push(0.0);
            phi.push(0.0);
            continue;
        }
        psi.push((-w * y).exp() * (1.0 - hf.h_tail(y)?));
        // int int H_t(x+y') H~_t(y'+xi) = int_0^inf e^{w(x - xi)} K_t(x, xi) dx
        let mut cross = 0.0;
        for j in (0..nodes.len()).filter(|&j| op.active[j]) {
            cross += wts[j] * (w * nodes[j]).exp() * k_t[(j, i)];
        }
        phi.push((w * y).exp() * hf.h_tilde_tail(y)? - cross);
    }
    Ok(G3Data { op, k_t, phi, psi })
}

/// g3(u) = (t/chi)^{1/3} <Phi_t, (1 - K_t)^{-1} Psi_t>.
pub fn g3(frame: &ScaledFrame) -> Result<f64> {
    g3_with(frame, DEFAULT_NODES, CONTOUR_POINTS)
}

pub fn g3_with(frame: &ScaledFrame, n_quad: usize, n_points: usize) -> Result<f64> {
    let data = g3_data(frame, n_quad, n_points)?;
    let sys = NystromSystem::from_matrix(data.op.system.rule.clone(), 0.0, data.k_t.clone());
    let sol = resolvent_solve(&sys, &data.psi)?;
    Ok(frame.scale() * sys.inner(&data.phi, &sol))
}

/// |<Phi, A Psi>| and the bound ||Phi|| ||A|| ||Psi|| (L2 norms on the rule,
/// operator norm of the discretized resolvent).
pub fn g3_cauchy_schwarz(frame: &ScaledFrame) -> Result<(f64, f64)> {
    let data = g3_data(frame, DEFAULT_NODES, CONTOUR_POINTS)?;
    let rule = &data.op.system.rule;
    let sys = NystromSystem::from_matrix(rule.clone(), 0.0, data.k_t.clone());
    let sol = resolvent_solve(&sys, &data.psi)?;
    let inner = sys.inner(&data.phi, &sol).abs();
    let n = rule.len();
    let one_minus = DMatrix::identity(n, n) - &sys.matrix;
    let sv = one_minus.singular_values();
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let norm_phi = sys.inner(&data.phi, &data.phi).sqrt();
    let norm_psi = sys.inner(&data.psi, &data.psi).sqrt();
    Ok((inner, norm_phi * norm_psi / smin))
}

/// F(u), G_0 pieces and the product F G_0 (formed with the adjugate so it
/// survives where F underflows the resolvent).
#[derive(Debug, Clone, Copy)]
pub struct FiniteParts {
    pub f: f64,
    pub g1: f64,
    pub g2: f64,
    /// Only when F > 1e-12.
    pub g3: Option<f64>,
    pub product: f64,
    pub trace: f64,
}

pub fn finite_parts(frame: &ScaledFrame) -> Result<FiniteParts> {
    finite_parts_with(frame, DEFAULT_NODES, CONTOUR_POINTS)
}

pub fn finite_parts_with(frame: &ScaledFrame, n_quad: usize, n_points: usize) -> Result<FiniteParts> {
    let data = g3_data(frame, n_quad, n_points)?;
    let sigma = frame.scale();
    let op = &data.op;
    let d = op.conjugation();
    let sw: Vec<f64> = op.system.rule.weights.iter().map(|w| w.sqrt()).collect();
    let n = d.len();
    let a = DVector::from_fn(n, |i, _| sw[i] * d[i] * data.phi[i]);
    let b = DVector::from_fn(n, |i, _| sw[i] * data.psi[i] / d[i]);
    // symmetric part sqrt(w) sigma K_LUE sqrt(w) is the stored matrix
    let (f, form) = det_and_adjugate_form(&op.system.matrix, &a, &b)?;
    let hf = HFunctions::new(frame, n_points)?;
    let g1l = lattice_g1(frame)?;
    let g2v = hf.g2_closed()?;
    let g3v = if f > 1e-12 { Some(sigma * form / f) } else { None };
    Ok(FiniteParts {
        f,
        g1: g1l,
        g2: g2v,
        g3: g3v,
        product: f * (g1l + g2v) + sigma * form,
        trace: op.trace()?,
    })
}

/// F_w(s, t) = (t/chi)^{-1/3} d/ds [F G_0] on an s-grid, with the stencil
/// used for the limit law.
pub fn finite_cdf(rho: f64, t: f64, w: f64, s_grid: &[f64]) -> Result<DistributionCurve> {
    let base = make_frame(rho, t, w, 0.0)?;
    positive_w(&base)?;
    let sigma = base.scale();
    let h = DIFF_STEP;
    let vals: Result<Vec<(f64, f64)>> = s_grid
        .par_iter()
        .map(|&s| {
            let mut v = [0.0; 7];
            for (slot, k) in v.iter_mut().zip(STENCIL) {
                *slot = finite_parts(&base.with_s(s + k * h)?)?.product;
            }
            let (d1, d2) = stencil_derivatives(&v, h);
            Ok((d1 / sigma, d2 / sigma))
        })
        .collect();
    let (cdf, pdf): (Vec<f64>, Vec<f64>) = vals?.into_iter().unzip();
    let curve = DistributionCurve::from_samples(s_grid.to_vec(), cdf, pdf);
    let dec = curve.max_decrease();
    if dec > 1e-4 {
        return Err(KpzError::Consistency(format!("finite-time CDF decreases by {dec:e}")));
    }
    Ok(curve)
}

/// Tr = -1/(2 pi i)^2 \oint_{Gamma_1} \oint_{Gamma_0} e^{M F_u(w)} / e^{M F_u(z)} dw dz / (w - z)^2.
pub fn trace_double_contour(analysis: &TraceAnalysis, contours: (ContourSpec, ContourSpec)) -> Result<f64> {
    let (g0, g1c) = contours;
    g0.validate()?;
    g1c.validate()?;
    if (g0.center - g1c.center).abs() <= g0.radius + g1c.radius {
        return Err(KpzError::Config(format!(
            "contours intersect: radii {} and {} at distance {}",
            g0.radius,
            g1c.radius,
            (g0.center - g1c.center).abs()
        )));
    }
    let big_m = analysis.big_m;
    let u = analysis.u_prime * big_m;
    let np = analysis.gamma * big_m;
    // M F_u(z) = u z - M ln z + N ln(1 - z)
    let mf = |z: C| z * u - z.ln() * big_m + (C::new(1.0, 0.0) - z).ln() * np;
    let side = |spec: &ContourSpec, sign: f64| -> (Vec<C>, Vec<C>, f64) {
        let mut zs = Vec::with_capacity(spec.n_points);
        let mut logs = Vec::with_capacity(spec.n_points);
        for k in 0..spec.n_points {
            let (z, th) = spec.node(k);
            zs.push(z);
            logs.push(mf(z) * sign + C::new(spec.radius.ln(), th));
        }
        let mx = logs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
        let vals = logs.iter().map(|l| C::from_polar((l.re - mx).exp(), l.im)).collect();
        (zs, vals, mx)
    };
    let (wz, wv, wmx) = side(&g0, 1.0);
    let (zz, zv, zmx) = side(&g1c, -1.0);
    let mut acc = C::new(0.0, 0.0);
    for (z, a) in zz.iter().zip(&zv) {
        let mut inner = C::new(0.0, 0.0);
        for (w, b) in wz.iter().zip(&wv) {
            let diff = w - z;
            inner += b / (diff * diff);
        }
        acc += a * inner;
    }
    let n2 = (g0.n_points * g1c.n_points) as f64;
    let log_mag = wmx + zmx + (acc.norm() / n2).ln();
    if log_mag > LOG_OVERFLOW {
        return Err(KpzError::Numeric(format!("trace sum overflows (log {log_mag})")));
    }
    Ok(-(acc / n2 * (wmx + zmx).exp()).re)
}

/// Critical points plus the double-contour trace on [`contour_pair`].
pub fn trace_analysis(frame: &ScaledFrame, n_points: usize) -> Result<TraceAnalysis> {
    let mut an = critical_points(frame)?;
    an.trace_value = Some(trace_double_contour(&an, contour_pair(&an, n_points))?);
    Ok(an)
}

/// Relative residuals of the two kernel identities at x:
/// int_x^inf R(x,y) e^{ay} dy against Z e^{ax}, and
/// int_x^inf e^{-ay} L(y,x) dy against e^{-ax}/Z, as computed/claimed - 1
/// (ratios formed in log space).
#[derive(Debug, Clone, Copy)]
pub struct IdentityResidual {
    pub x: f64,
    pub r_relative: f64,
    pub l_relative: f64,
}

pub fn kernel_identity_residuals(frame: &ScaledFrame, x: f64) -> Result<IdentityResidual> {
    let log_z = frame.log_z()?;
    let a = frame.a;
    let (np, nm) = frame.counts()?;
    // integrands decay like gamma densities in the gap; panels up to a
    // generous multiple of the mean
    let span_r = (nm + 12.0 * nm.sqrt() + 40.0) / frame.rho;
    let span_l = (np + 12.0 * np.sqrt() + 40.0) / (1.0 - frame.rho);
    // the e^{a x} factors are taken out before integrating
    let r_int = panels(span_r, |g| Ok(kernel_r(frame, x, x + g)? * (a * g).exp()))?;
    let l_int = panels(span_l, |g| Ok(kernel_l(frame, x + g, x)? * (-a * g).exp()))?;
    Ok(IdentityResidual {
        x,
        r_relative: signed_ratio(r_int, log_z) - 1.0,
        l_relative: signed_ratio(l_int, -log_z) - 1.0,
    })
}

/// v / e^{log_claim} without forming e^{log_claim}.
fn signed_ratio(v: f64, log_claim: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    v.signum() * (v.abs().ln() - log_claim).exp()
}

fn panels(span: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let rule = QuadratureRule::interval(0.0, 1.0, 16);
    let count = (span / 4.0).ceil().max(8.0) as usize;
    let h = span / count as f64;
    let mut acc = 0.0;
    for p in 0..count {
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            acc += h * w * f((p as f64 + x) * h)?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_reference_values() {
        let f = make_frame(0.5, 100.0, 0.0, 0.0).unwrap();
        assert_eq!((f.chi, f.a, f.m, f.d, f.u), (0.25, 0.0, 25.0, 0.0, 100.0));
        assert!(make_frame(0.01, 100.0, 0.0, 0.0).is_err());
        assert!(make_frame(0.5, 5.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn lattice_parity() {
        for &(rho, t, w) in &[(0.5, 100.0, 0.3), (0.4, 50.0, 0.7), (0.5, 50.0, 0.0), (0.3, 77.0, 0.1)] {
            let lp = make_frame(rho, t, w, 0.0).unwrap().lattice();
            assert_eq!((lp.level - lp.site).rem_euclid(2), 0);
            assert_eq!(lp.plus() + lp.minus(), lp.level);
        }
    }

    #[test]
    fn laguerre_functions_orthonormal() {
        let rule = build_semi_infinite_rule(0.0, 96, 8.0).unwrap();
        let phi = laguerre_functions(&rule.nodes, 6, 3);
        for i in 0..6 {
            for j in 0..6 {
                let g: f64 = (0..rule.len()).map(|k| rule.weights[k] * phi[(i, k)] * phi[(j, k)]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g - e).abs() < 1e-9, "{i} {j} {g}");
            }
        }
    }

    #[test]
    fn critical_points_double_root() {
        let gamma: f64 = 2.0;
        let up = (1.0 + gamma.sqrt()).powi(2);
        let (p, m) = critical_points_at(up, gamma);
        let zc = 1.0 / (1.0 + gamma.sqrt());
        assert!((p.re - zc).abs() < 1e-12 && (m.re - zc).abs() < 1e-12);
    }
}
