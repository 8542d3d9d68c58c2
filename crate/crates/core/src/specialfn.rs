//! Airy function Ai, its derivative, and the Airy kernel on the real line.
//!
//! Values on [-24, 12] come from a precomputed table of (Ai, Ai') at spacing
//! 0.25 followed by a local Taylor expansion of the Airy equation y'' = x y.
//! Outside that window the asymptotic expansions are accurate far beyond f64.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{KpzError, Result};

pub const AI_ZERO: f64 = 0.355_028_053_887_817_239_26;
pub const AI_PRIME_ZERO: f64 = -0.258_819_403_792_806_798_40;

const TABLE_LO: f64 = -24.0;
const TABLE_HI: f64 = 12.0;
const TABLE_STEP: f64 = 0.25;
const MAX_ABS_X: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AiryPair {
    pub ai: f64,
    pub ai_prime: f64,
}

/// Taylor step for y'' = x y from (x0, y0, dy0) to x0 + h.
fn taylor_step(x0: f64, y0: f64, dy0: f64, h: f64) -> (f64, f64) {
    // c[n] are Taylor coefficients of y around x0.
    let mut c_nm1 = dy0; // c_{n-1}
    let mut c_n = x0 * y0 / 2.0; // c_2
    let mut c_nm2 = y0; // c_{n-2}
    let mut y = y0 + dy0 * h;
    let mut dy = dy0;
    let mut hp = h; // h^(n-1)
    let mut n = 2usize;
    let mut quiet = 0;
    loop {
        let term = c_n * hp * h;
        let dterm = n as f64 * c_n * hp;
        y += term;
        dy += dterm;
        if term.abs() <= 1e-18 * y.abs() && dterm.abs() <= 1e-18 * dy.abs() {
            quiet += 1;
            if quiet >= 3 {
                break;
            }
        } else {
            quiet = 0;
        }
        if n > 120 {
            break;
        }
        // c_{n+1} = (x0 c_{n-1} + c_{n-2}) / ((n+1) n)
        let next = (x0 * c_nm1 + c_nm2) / ((n + 1) as f64 * n as f64);
        c_nm2 = c_nm1;
        c_nm1 = c_n;
        c_n = next;
        hp *= h;
        n += 1;
    }
    (y, dy)
}

/// Coefficients u_k of the large-argument expansions.
fn asymptotic_u(k_max: usize) -> Vec<f64> {
    let mut u = vec![1.0; k_max + 1];
    for k in 1..=k_max {
        let kf = k as f64;
        u[k] = u[k - 1] * (6.0 * kf - 5.0) * (6.0 * kf - 3.0) * (6.0 * kf - 1.0)
            / ((2.0 * kf - 1.0) * 216.0 * kf);
    }
    u
}

fn asymptotic_v(u: &[f64]) -> Vec<f64> {
    u.iter()
        .enumerate()
        .map(|(k, &uk)| {
            let kf = k as f64;
            -(6.0 * kf + 1.0) / (6.0 * kf - 1.0) * uk
        })
        .collect()
}

/// Decaying branch, x well inside the region where e^{-2 zeta} < 1e-20.
fn asymptotic_positive(x: f64) -> AiryPair {
    let zeta = 2.0 / 3.0 * x.powf(1.5);
    let u = asymptotic_u(30);
    let v = asymptotic_v(&u);
    let mut su = 0.0;
    let mut sv = 0.0;
    let mut zp = 1.0;
    let mut last = f64::INFINITY;
    for k in 0..u.len() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let tu = sign * u[k] / zp;
        if tu.abs() > last {
            break;
        }
        last = tu.abs();
        su += tu;
        sv += sign * v[k] / zp;
        if tu.abs() < 1e-18 {
            break;
        }
        zp *= zeta;
    }
    let e = (-zeta).exp();
    let q = x.powf(0.25);
    AiryPair {
        ai: e / (2.0 * PI.sqrt() * q) * su,
        ai_prime: -q * e / (2.0 * PI.sqrt()) * sv,
    }
}

/// Oscillatory branch for x = -z with z large.
fn asymptotic_negative(z: f64) -> AiryPair {
    let zeta = 2.0 / 3.0 * z.powf(1.5);
    let u = asymptotic_u(30);
    let v = asymptotic_v(&u);
    let (mut pu, mut qu, mut pv, mut qv) = (0.0, 0.0, 0.0, 0.0);
    let mut zp = 1.0;
    for k in 0..u.len() {
        let tu = u[k] / zp;
        let tv = v[k] / zp;
        // (-1)^{floor(k/2)}
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        if k % 2 == 0 {
            pu += sign * tu;
            pv += sign * tv;
        } else {
            qu += sign * tu;
            qv += sign * tv;
        }
        if tu.abs() < 1e-18 {
            break;
        }
        zp *= zeta;
    }
    let phase = zeta - PI / 4.0;
    let (sn, cs) = phase.sin_cos();
    let q = z.powf(0.25);
    AiryPair {
        ai: (cs * pu + sn * qu) / (PI.sqrt() * q),
        ai_prime: q * (sn * pv - cs * qv) / PI.sqrt(),
    }
}

fn table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = ((TABLE_HI - TABLE_LO) / TABLE_STEP).round() as usize + 1;
        let mut vals = vec![(0.0, 0.0); n];
        let node = |k: usize| TABLE_LO + k as f64 * TABLE_STEP;
        let k_zero = (-TABLE_LO / TABLE_STEP).round() as usize;
        let k_minus2 = ((-2.0 - TABLE_LO) / TABLE_STEP).round() as usize;
        let k_one = ((1.0 - TABLE_LO) / TABLE_STEP).round() as usize;
        // Maclaurin region [-2, 1].
        for (k, slot) in vals.iter_mut().enumerate().take(k_one + 1).skip(k_minus2) {
            *slot = taylor_step(0.0, AI_ZERO, AI_PRIME_ZERO, node(k));
        }
        // (1, 12]: start from the asymptotic value at the right end and step
        // leftwards, which is the stable direction for the decaying solution.
        let top = asymptotic_positive(TABLE_HI);
        vals[n - 1] = (top.ai, top.ai_prime);
        for k in (k_one + 1..n - 1).rev() {
            let (y, dy) = vals[k + 1];
            vals[k] = taylor_step(node(k + 1), y, dy, -TABLE_STEP);
        }
        // [-24, -2): oscillatory, either direction is neutral.
        for k in (0..k_minus2).rev() {
            let (y, dy) = vals[k + 1];
            vals[k] = taylor_step(node(k + 1), y, dy, -TABLE_STEP);
        }
        debug_assert!(vals[k_zero].0 == AI_ZERO);
        vals
    })
}

fn check_arg(x: f64) -> Result<()> {
    if !x.is_finite() || x.abs() > MAX_ABS_X {
        return Err(KpzError::Domain(format!(
            "Airy argument {x} outside [-{MAX_ABS_X}, {MAX_ABS_X}]"
        )));
    }
    Ok(())
}

/// Ai and Ai' together; callers needing both should prefer this.
pub fn airy_pair(x: f64) -> Result<AiryPair> {
    check_arg(x)?;
    Ok(airy_pair_unchecked(x))
}

pub(crate) fn airy_pair_unchecked(x: f64) -> AiryPair {
    if x > TABLE_HI {
        return asymptotic_positive(x);
    }
    if x < TABLE_LO {
        return asymptotic_negative(-x);
    }
    let tab = table();
    let k = ((x - TABLE_LO) / TABLE_STEP).round() as usize;
    let k = k.min(tab.len() - 1);
    let x0 = TABLE_LO + k as f64 * TABLE_STEP;
    let (y0, dy0) = tab[k];
    let h = x - x0;
    if h == 0.0 {
        return AiryPair { ai: y0, ai_prime: dy0 };
    }
    let (ai, ai_prime) = taylor_step(x0, y0, dy0, h);
    AiryPair { ai, ai_prime }
}

pub fn airy_ai(x: f64) -> Result<f64> {
    Ok(airy_pair(x)?.ai)
}

pub fn airy_ai_prime(x: f64) -> Result<f64> {
    Ok(airy_pair(x)?.ai_prime)
}

/// Ai(x) for arguments known to be in range; beyond |x| = 200 returns the
/// limiting value (0 on the right, the asymptotic form on the left).
pub(crate) fn ai(x: f64) -> f64 {
    if x > MAX_ABS_X {
        return 0.0;
    }
    airy_pair_unchecked(x).ai
}

/// Diagonal K(a, a) = Ai'(a)^2 - a Ai(a)^2.
fn kernel_diag(a: f64) -> f64 {
    let p = airy_pair_unchecked(a);
    p.ai_prime * p.ai_prime - a * p.ai * p.ai
}

/// Airy kernel at shifted arguments a = x + s, b = y + s.
///
/// Near the diagonal the closed form cancels, so for |a - b| < 1e-4 the even
/// expansion about the midpoint is used (error O(|a-b|^6)).
pub fn airy_kernel_shifted(a: f64, b: f64) -> f64 {
    if a > MAX_ABS_X && b > MAX_ABS_X {
        return 0.0;
    }
    let e = a - b;
    if e.abs() < 1e-4 {
        let m = 0.5 * (a + b);
        let p = airy_pair_unchecked(m);
        let (aa, bb) = (p.ai, p.ai_prime);
        let d2 = 0.25 * e * e;
        let k0 = bb * bb - m * aa * aa;
        let k2 = -(2.0 * aa * aa * m * m - aa * bb - 2.0 * bb * bb * m) / 3.0;
        let k4 = -(8.0 * aa * aa * m * m * m - 3.0 * aa * aa - 4.0 * aa * bb * m
            - 8.0 * bb * bb * m * m)
            / 60.0;
        return k0 + d2 * (k2 + d2 * k4);
    }
    let pa = airy_pair_unchecked(a.min(MAX_ABS_X + 1.0));
    let pb = airy_pair_unchecked(b.min(MAX_ABS_X + 1.0));
    (pa.ai * pb.ai_prime - pa.ai_prime * pb.ai) / e
}

/// K_{Ai,s}(x, y) = int_0^inf Ai(x+s+l) Ai(y+s+l) dl.
pub fn airy_kernel(x: f64, y: f64, s: f64) -> Result<f64> {
    if !(x.is_finite() && y.is_finite() && s.is_finite()) {
        return Err(KpzError::Domain("non-finite Airy kernel argument".into()));
    }
    let (a, b) = (x + s, y + s);
    if a < -MAX_ABS_X || b < -MAX_ABS_X {
        return Err(KpzError::Domain(format!(
            "Airy kernel argument below -{MAX_ABS_X}"
        )));
    }
    // Evaluate in a canonical order so K(x,y,s) == K(y,x,s) bit for bit.
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    Ok(airy_kernel_shifted(hi, lo))
}

#[allow(dead_code)]
pub(crate) fn kernel_diag_at(a: f64) -> f64 {
    kernel_diag(a)
}
