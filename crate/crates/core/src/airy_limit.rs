//! Limit objects: F_GUE, the auxiliary function g(s, w), the limit law
//! F_w(s) = d/ds [F_GUE(s + w^2) g(s + w^2, w)], its moments, g_sc and g_sc''.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{KpzError, Result};
use crate::fredholm::{
    build_semi_infinite_rule, det_and_adjugate_form, fredholm_det, gauss_legendre,
    integrate_panels, NystromSystem, DEFAULT_MAP_SCALE, DEFAULT_NODES,
};
use crate::specialfn::{ai, airy_kernel_shifted, airy_pair_unchecked};

/// Stand-in for w = 0 (right limit).
pub const W_ZERO_SUBSTITUTE: f64 = 1e-3;
pub const DIFF_STEP: f64 = 1e-3;
pub const GRID_LO: f64 = -12.0;
pub const GRID_HI: f64 = 8.0;
pub const GRID_STEP: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct LimitLawRequest {
    pub w: f64,
    pub s_grid: Vec<f64>,
    pub n_quad: usize,
}

impl LimitLawRequest {
    pub fn standard(w: f64) -> Self {
        LimitLawRequest { w, s_grid: uniform_grid(GRID_LO, GRID_HI, GRID_STEP), n_quad: DEFAULT_NODES }
    }
}

pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributionCurve {
    pub s: Vec<f64>,
    pub cdf: Vec<f64>,
    pub pdf: Vec<f64>,
    /// Orders 0..=4.
    pub moments: Vec<f64>,
    pub moment_errors: Vec<f64>,
    pub quad_error: f64,
}

impl DistributionCurve {
    /// Builds moments from a pdf sampled on a uniform grid (Simpson when the
    /// point count is odd) with tail corrections from the end values of cdf.
    pub fn from_samples(s: Vec<f64>, cdf: Vec<f64>, pdf: Vec<f64>) -> Self {
        let (moments, moment_errors) = moments_from_pdf(&s, &cdf, &pdf);
        let quad_error = moment_errors.iter().cloned().fold(0.0, f64::max);
        DistributionCurve { s, cdf, pdf, moments, moment_errors, quad_error }
    }

    pub fn mean(&self) -> f64 {
        self.moments[1] / self.moments[0]
    }

    /// Linear interpolation of the CDF, clamped to the end values.
    pub fn cdf_at(&self, x: f64) -> f64 {
        let s = &self.s;
        if x <= s[0] {
            return self.cdf[0];
        }
        if x >= s[s.len() - 1] {
            return self.cdf[s.len() - 1];
        }
        let k = s.partition_point(|&v| v <= x) - 1;
        let t = (x - s[k]) / (s[k + 1] - s[k]);
        self.cdf[k] * (1.0 - t) + self.cdf[k + 1] * t
    }

    pub fn max_decrease(&self) -> f64 {
        self.cdf
            .windows(2)
            .map(|p| p[0] - p[1])
            .fold(0.0, f64::max)
    }
}

fn moments_from_pdf(s: &[f64], cdf: &[f64], pdf: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = s.len();
    let h = (s[n - 1] - s[0]) / (n - 1) as f64;
    let simpson = n % 2 == 1 && n >= 3;
    let (lo, hi) = (s[0], s[n - 1]);
    let left_mass = cdf[0].max(0.0);
    let right_mass = (1.0 - cdf[n - 1]).max(0.0);
    let mut moments = Vec::with_capacity(5);
    let mut errors = Vec::with_capacity(5);
    for ell in 0..=4i32 {
        let f: Vec<f64> = s.iter().zip(pdf).map(|(x, p)| x.powi(ell) * p).collect();
        let trap = h * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[n - 1]));
        let body = if simpson {
            let mut acc = f[0] + f[n - 1];
            for (k, v) in f.iter().enumerate().take(n - 1).skip(1) {
                acc += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
            }
            acc * h / 3.0
        } else {
            trap
        };
        let tails = left_mass * exp_tail_moment(lo, -hazard(pdf[0], left_mass), ell)
            + right_mass * exp_tail_moment(hi, hazard(pdf[n - 1], right_mass), ell);
        let point_tails = lo.powi(ell) * left_mass + hi.powi(ell) * right_mass;
        moments.push(body + tails);
        errors.push((body - trap).abs() / 15.0 + (tails - point_tails).abs());
    }
    (moments, errors)
}

/// Hazard rate pdf / tail mass at a grid end; infinite when undefined.
fn hazard(pdf: f64, mass: f64) -> f64 {
    if mass > 0.0 && pdf > 0.0 {
        pdf / mass
    } else {
        f64::INFINITY
    }
}

/// E[(a + X)^ell] for X exponential with rate `rate` (negative rate means the
/// tail extends to the left). Infinite rate collapses to a point mass at a.
fn exp_tail_moment(a: f64, rate: f64, ell: i32) -> f64 {
    if !rate.is_finite() {
        return a.powi(ell);
    }
    let inv = 1.0 / rate;
    let mut acc = 0.0;
    let mut binom = 1.0;
    let mut fact = 1.0;
    for k in 0..=ell {
        if k > 0 {
            binom *= (ell - k + 1) as f64 / k as f64;
            fact *= k as f64;
        }
        acc += binom * a.powi(ell - k) * fact * inv.powi(k);
    }
    acc
}

/// Cumulative Laplace-type integrals I(c) = int_c^inf e^{wy} Ai(y) dy and
/// J(c) = int_c^inf y e^{wy} Ai(y) dy for a fixed w.
#[derive(Debug, Clone)]
pub struct AiryLaplace {
    pub w: f64,
    lo: f64,
    step: f64,
    cum_i: Vec<f64>,
    cum_j: Vec<f64>,
    xi: Vec<f64>,
    wi: Vec<f64>,
}

const LAPLACE_HI: f64 = 45.0;
const LAPLACE_ORDER: usize = 10;

impl AiryLaplace {
    pub fn new(w: f64) -> Self {
        let lo = -60.0;
        let step = 0.1;
        let (xi, wi) = gauss_legendre(LAPLACE_ORDER);
        let cells = ((LAPLACE_HI - lo) / step).round() as usize;
        let mut cum_i = vec![0.0; cells + 1];
        let mut cum_j = vec![0.0; cells + 1];
        let mut tmp = AiryLaplace { w, lo, step, cum_i: vec![], cum_j: vec![], xi, wi };
        for k in (0..cells).rev() {
            let a = lo + k as f64 * step;
            let (pi, pj) = tmp.cell(a, a + step);
            cum_i[k] = cum_i[k + 1] + pi;
            cum_j[k] = cum_j[k + 1] + pj;
        }
        tmp.cum_i = cum_i;
        tmp.cum_j = cum_j;
        tmp
    }

    fn cell(&self, a: f64, b: f64) -> (f64, f64) {
        let half = 0.5 * (b - a);
        let mut si = 0.0;
        let mut sj = 0.0;
        for (x, w) in self.xi.iter().zip(&self.wi) {
            let y = a + half * (x + 1.0);
            let v = w * (self.w * y).exp() * ai(y);
            si += v;
            sj += v * y;
        }
        (half * si, half * sj)
    }

    /// (I(c), J(c)).
    pub fn above(&self, c: f64) -> (f64, f64) {
        if c >= LAPLACE_HI {
            return (0.0, 0.0);
        }
        if c < self.lo {
            let panels = ((self.lo - c) / self.step).ceil() as usize;
            let h = (self.lo - c) / panels as f64;
            let mut si = self.cum_i[0];
            let mut sj = self.cum_j[0];
            for p in 0..panels {
                let (a, b) = self.cell(c + p as f64 * h, c + (p + 1) as f64 * h);
                si += a;
                sj += b;
            }
            return (si, sj);
        }
        let k = (((c - self.lo) / self.step).floor() as usize).min(self.cum_i.len() - 2);
        let right = self.lo + (k + 1) as f64 * self.step;
        let (pi, pj) = if right > c { self.cell(c, right) } else { (0.0, 0.0) };
        (self.cum_i[k + 1] + pi, self.cum_j[k + 1] + pj)
    }

    /// hat_psi in absolute coordinates: e^{-wc} int_{-inf}^c e^{wv} Ai(v) dv.
    pub fn psi(&self, c: f64) -> f64 {
        let (i, _) = self.above(c);
        (-self.w * c).exp() * ((self.w.powi(3) / 3.0).exp() - i)
    }
}

fn effective_w(w: f64) -> Result<f64> {
    if !w.is_finite() || w < 0.0 {
        return Err(KpzError::Unsupported(format!(
            "w = {w}: only w >= 0 is supported (w = 0 via the right limit)"
        )));
    }
    Ok(if w == 0.0 { W_ZERO_SUBSTITUTE } else { w })
}

/// Airy kernel matrix at absolute arguments, one Airy evaluation per node.
pub fn airy_kernel_matrix(args: &[f64]) -> nalgebra::DMatrix<f64> {
    let pairs: Vec<_> = args.iter().map(|&a| airy_pair_unchecked(a.min(201.0))).collect();
    let n = args.len();
    let mut m = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (a, b) = (args[i], args[j]);
            let v = if (a - b).abs() < 1e-4 {
                airy_kernel_shifted(a.max(b), a.min(b))
            } else {
                let (pa, pb) = (pairs[i], pairs[j]);
                (pa.ai * pb.ai_prime - pa.ai_prime * pb.ai) / (a - b)
            };
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Nyström system of K_{Ai} on [s, inf) (absolute coordinates).
pub fn airy_system(s: f64, n_quad: usize, map_scale: f64) -> Result<NystromSystem> {
    let rule = build_semi_infinite_rule(s, n_quad, map_scale)?;
    let k = airy_kernel_matrix(&rule.nodes);
    Ok(NystromSystem::from_matrix(rule, s, k))
}

/// F_GUE(s) = det(1 - K_Ai) on [s, inf).
pub fn f_gue(s: f64, n_quad: usize) -> Result<f64> {
    if !s.is_finite() {
        return Err(KpzError::Domain("s must be finite".into()));
    }
    fredholm_det(&airy_system(s, n_quad, DEFAULT_MAP_SCALE)?)
}

/// hat_psi_{w,s}(x) = int_{R_-} e^{wz} Ai(x+z+s) dz, via the full-line
/// Laplace identity int e^{wy} Ai(y) dy = e^{w^3/3}.
pub fn hat_psi(w: f64, s: f64, x: f64) -> Result<f64> {
    let w = positive_w(w)?;
    Ok(AiryLaplace::new(w).psi(x + s))
}

/// hat_phi_{w,s}(x) = int_{R_-} e^{wz+ws} K_{Ai,s}(z, x) dz
///                  = e^{ws} int_0^inf Ai(x+s+l) hat_psi_{w,s}(l) dl.
pub fn hat_phi(w: f64, s: f64, x: f64, n_quad: usize) -> Result<f64> {
    let w = positive_w(w)?;
    let lap = AiryLaplace::new(w);
    let rule = build_semi_infinite_rule(0.0, n_quad, DEFAULT_MAP_SCALE)?;
    Ok((w * s).exp() * rule.integrate(|l| ai(x + s + l) * lap.psi(s + l)))
}

fn positive_w(w: f64) -> Result<f64> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(KpzError::Unsupported(format!(
            "w = {w}: the half-line integrals need w > 0"
        )));
    }
    Ok(w)
}

/// The double integral over R_-^2 of e^{w(x+y)} Ai(x+y+s), reduced to
/// int_{-inf}^0 (-u) e^{wu} Ai(u+s) du.
pub fn first_term_reduced(s: f64, w: f64) -> Result<f64> {
    let w = positive_w(w)?;
    let lap = AiryLaplace::new(w);
    let e3 = (w.powi(3) / 3.0).exp();
    let (i, j) = lap.above(s);
    Ok((-w * s).exp() * (s * (e3 - i) - (w * w * e3 - j)))
}

/// F_GUE(S), the product F_GUE(S) g(S, w), and g itself when the
/// determinant is large enough for the resolvent to be meaningful.
#[derive(Debug, Clone, Copy)]
pub struct PhiParts {
    pub f_gue: f64,
    pub product: f64,
    pub g: Option<f64>,
}

/// g(S, w) = (S - w^2) + e^{-w^3/3}[J(S) - S I(S)]
///         + e^{-w^3/3} <hat_psi, (1 - K_{Ai,S})^{-1} hat_phi>.
///
/// The first two terms are e^{wS} times the R_-^2 integral; that factor is
/// what makes F_GUE(S) g(S, w) - (S - w^2) vanish as S -> +inf.
///
/// The product with F_GUE is formed through the spectral decomposition,
/// det(1-A) (1-A)^{-1} = sum_k v_k v_k^T prod_{j != k} (1 - mu_j), so it stays
/// accurate deep in the left tail where (1 - K) is numerically singular.
pub fn phi_parts(big_s: f64, lap: &AiryLaplace, n_quad: usize, map_scale: f64) -> Result<PhiParts> {
    let w = lap.w;
    let sys = airy_system(big_s, n_quad, map_scale)?;
    let a = &sys.rule.nodes;
    let wts = &sys.rule.weights;
    let psi: Vec<f64> = a.iter().map(|&c| lap.psi(c)).collect();
    let ews = (w * big_s).exp();
    let hphi: Vec<f64> = a
        .iter()
        .map(|&ai_node| {
            let mut acc = 0.0;
            for j in 0..a.len() {
                // lambda_j = a_j - S
                acc += wts[j] * ai(ai_node + a[j] - big_s) * psi[j];
            }
            ews * acc
        })
        .collect();
    let (f_gue, adj_form) =
        det_and_adjugate_form(&sys.matrix, &sys.to_weighted(&psi), &sys.to_weighted(&hphi))?;
    let e3m = (-w.powi(3) / 3.0).exp();
    let (i, j) = lap.above(big_s);
    let linear = (big_s - w * w) + e3m * (j - big_s * i);
    let product = f_gue * linear + e3m * adj_form;
    let g = if f_gue > 1e-12 { Some(product / f_gue) } else { None };
    Ok(PhiParts { f_gue, product, g })
}

pub fn g_func(s: f64, w: f64, n_quad: usize) -> Result<f64> {
    let w = positive_w(w)?;
    let lap = AiryLaplace::new(w);
    let p = phi_parts(s, &lap, n_quad, DEFAULT_MAP_SCALE)?;
    p.g.ok_or(KpzError::Singular { det: p.f_gue })
}

/// Phi(s) = F_GUE(s + w^2) g(s + w^2, w).
pub fn phi(s: f64, lap: &AiryLaplace, n_quad: usize) -> Result<f64> {
    let w = lap.w;
    Ok(phi_parts(s + w * w, lap, n_quad, DEFAULT_MAP_SCALE)?.product)
}

/// First and second derivative of a function from values at
/// x + {-2h, -h, -h/2, 0, h/2, h, 2h}: five-point first derivative with one
/// Richardson step (h, h/2), five-point second derivative at step h.
pub fn stencil_derivatives(v: &[f64; 7], h: f64) -> (f64, f64) {
    let [m2, m1, mh, c, ph, p1, p2] = *v;
    let d_h = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
    let hh = 0.5 * h;
    let d_hh = (m1 - 8.0 * mh + 8.0 * ph - p1) / (12.0 * hh);
    let first = (16.0 * d_hh - d_h) / 15.0;
    let second = (-m2 + 16.0 * m1 - 30.0 * c + 16.0 * p1 - p2) / (12.0 * h * h);
    (first, second)
}

pub const STENCIL: [f64; 7] = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0];

/// CDF and pdf of F_w at s.
fn cdf_pdf_at(s: f64, lap: &AiryLaplace, n_quad: usize) -> Result<(f64, f64)> {
    let h = DIFF_STEP;
    let mut v = [0.0; 7];
    for (slot, k) in v.iter_mut().zip(STENCIL) {
        *slot = phi(s + k * h, lap, n_quad)?;
    }
    Ok(stencil_derivatives(&v, h))
}

pub fn limit_cdf(request: &LimitLawRequest) -> Result<DistributionCurve> {
    let w = effective_w(request.w)?;
    validate_grid(&request.s_grid)?;
    let lap = AiryLaplace::new(w);
    let vals: Result<Vec<(f64, f64)>> = request
        .s_grid
        .par_iter()
        .map(|&s| cdf_pdf_at(s, &lap, request.n_quad))
        .collect();
    let (cdf, pdf): (Vec<f64>, Vec<f64>) = vals?.into_iter().unzip();
    let curve = DistributionCurve::from_samples(request.s_grid.clone(), cdf, pdf);
    let dec = curve.max_decrease();
    if dec > 1e-5 {
        return Err(KpzError::Consistency(format!("limit CDF decreases by {dec:e}")));
    }
    Ok(curve)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 3 {
        return Err(KpzError::Config("s-grid needs at least 3 points".into()));
    }
    if grid.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(KpzError::Config("s-grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Moments of orders 0..=4 from the two-sided integration-by-parts form:
/// right half-line through s - Phi(s), left half-line through F_w itself.
pub fn moments_by_parts_all(w: f64, n_quad: usize) -> Result<[f64; 5]> {
    let w = effective_w(w)?;
    let lap = AiryLaplace::new(w);
    let order = 8;
    let (xi, wi) = gauss_legendre(order);
    let panel_nodes = |a: f64, b: f64, panels: usize| -> Vec<(f64, f64)> {
        let h = (b - a) / panels as f64;
        let mut out = Vec::with_capacity(panels * order);
        for p in 0..panels {
            let lo = a + p as f64 * h;
            for (x, wt) in xi.iter().zip(&wi) {
                out.push((lo + 0.5 * h * (x + 1.0), 0.5 * h * wt));
            }
        }
        out
    };
    let right = panel_nodes(0.0, GRID_HI + 4.0, 24);
    let left = panel_nodes(GRID_LO, 0.0, 24);
    let resid: Result<Vec<f64>> = right
        .par_iter()
        .map(|&(s, _)| Ok(s - phi(s, &lap, n_quad)?))
        .collect();
    let resid = resid?;
    let cdf_left: Result<Vec<f64>> = left
        .par_iter()
        .map(|&(s, _)| Ok(cdf_pdf_at(s, &lap, n_quad)?.0))
        .collect();
    let cdf_left = cdf_left?;
    let phi0 = phi(0.0, &lap, n_quad)?;
    let mut out = [0.0; 5];
    out[0] = 1.0;
    for (ell, slot) in out.iter_mut().enumerate().skip(1) {
        let l = ell as f64;
        let left_part: f64 = left
            .iter()
            .zip(&cdf_left)
            .map(|(&(s, wt), f)| wt * s.powi(ell as i32 - 1) * f)
            .sum::<f64>();
        let right_part = if ell == 1 {
            phi0
        } else {
            -l * (l - 1.0)
                * right
                    .iter()
                    .zip(&resid)
                    .map(|(&(s, wt), r)| wt * s.powi(ell as i32 - 2) * r)
                    .sum::<f64>()
        };
        *slot = right_part - l * left_part;
    }
    Ok(out)
}

pub fn moments_by_parts(w: f64, ell: usize) -> Result<f64> {
    if ell > 4 {
        return Err(KpzError::Domain(format!("moment order {ell} not in 0..=4")));
    }
    if ell == 0 {
        return Ok(1.0);
    }
    Ok(moments_by_parts_all(w, DEFAULT_NODES)?[ell])
}

/// Second moment of F_w. Negative w is rejected here; callers wanting the
/// even extension use g_sc(|w|).
pub fn g_sc(w: f64) -> Result<f64> {
    g_sc_with(w, DEFAULT_NODES)
}

pub fn g_sc_with(w: f64, n_quad: usize) -> Result<f64> {
    let mut req = LimitLawRequest::standard(w);
    req.n_quad = n_quad;
    Ok(limit_cdf(&req)?.moments[2])
}

/// (g_sc(w-h) - 2 g_sc(w) + g_sc(w+h)) / h^2 with one Richardson step over
/// (h, h/2). Arguments below zero use the evenness of g_sc in w.
pub fn g_sc_second_derivative(w: f64, h: f64) -> Result<f64> {
    if !(0.05..=0.3).contains(&h) {
        return Err(KpzError::Domain(format!("step h = {h} outside [0.05, 0.3]")));
    }
    let pts = [w - h, w - 0.5 * h, w, w + 0.5 * h, w + h];
    let vals: Result<Vec<f64>> = pts.par_iter().map(|&x| g_sc(x.abs())).collect();
    let v = vals?;
    Ok(second_difference_richardson(&v, h))
}

/// From values at w + {-h, -h/2, 0, h/2, h}.
pub fn second_difference_richardson(v: &[f64], h: f64) -> f64 {
    let d_h = (v[0] - 2.0 * v[2] + v[4]) / (h * h);
    let hh = 0.5 * h;
    let d_hh = (v[1] - 2.0 * v[2] + v[3]) / (hh * hh);
    (4.0 * d_hh - d_h) / 3.0
}

/// Shared helper for quadratures of smooth functions on [a, b].
pub fn integrate(a: f64, b: f64, f: impl FnMut(f64) -> f64) -> f64 {
    integrate_panels(a, b, 32, 10, f)
}
