//! Nyström discretization of integral operators on half-lines, with
//! determinants, resolvent solves, traces and spectra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{KpzError, Result};

pub const DEFAULT_NODES: usize = 64;
pub const DEFAULT_MAP_SCALE: f64 = 4.0;

/// Gauss-Legendre nodes and weights on [-1, 1], nodes increasing.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() <= 1e-16 * z.abs().max(1.0) {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Composite Gauss-Legendre integral of f over [a, b] with `panels` panels.
pub fn integrate_panels<F: FnMut(f64) -> f64>(
    a: f64,
    b: f64,
    panels: usize,
    order: usize,
    mut f: F,
) -> f64 {
    let (xi, wi) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (x, w) in xi.iter().zip(&wi) {
            acc += 0.5 * h * w * f(lo + 0.5 * h * (x + 1.0));
        }
    }
    acc
}

#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Gauss-Legendre rule on a finite interval.
    pub fn interval(a: f64, b: f64, n: usize) -> Self {
        let (xi, wi) = gauss_legendre(n);
        let half = 0.5 * (b - a);
        QuadratureRule {
            nodes: xi.iter().map(|x| a + half * (x + 1.0)).collect(),
            weights: wi.iter().map(|w| half * w).collect(),
        }
    }
}

/// Gauss-Legendre mapped to [cutoff, inf) by x = cutoff + L (1+xi)/(1-xi).
pub fn build_semi_infinite_rule(cutoff: f64, n: usize, map_scale: f64) -> Result<QuadratureRule> {
    if n < 8 {
        return Err(KpzError::Config(format!("quadrature needs n >= 8, got {n}")));
    }
    if !(map_scale > 0.0 && map_scale.is_finite()) {
        return Err(KpzError::Config(format!("map_scale must be positive, got {map_scale}")));
    }
    if !cutoff.is_finite() {
        return Err(KpzError::Config("cutoff must be finite".into()));
    }
    let (xi, wi) = gauss_legendre(n);
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (x, w) in xi.iter().zip(&wi) {
        let d = 1.0 - x;
        nodes.push(cutoff + map_scale * (1.0 + x) / d);
        weights.push(w * 2.0 * map_scale / (d * d));
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Symmetrized Nyström matrix sqrt(w_i) K(x_i, x_j) sqrt(w_j) on [cutoff, inf).
#[derive(Debug, Clone)]
pub struct NystromSystem {
    pub rule: QuadratureRule,
    pub left_endpoint: f64,
    pub matrix: DMatrix<f64>,
}

impl NystromSystem {
    pub fn new<K: Fn(f64, f64) -> f64>(rule: QuadratureRule, left_endpoint: f64, kernel: K) -> Self {
        let n = rule.len();
        let sw: Vec<f64> = rule.weights.iter().map(|w| w.sqrt()).collect();
        let matrix = DMatrix::from_fn(n, n, |i, j| sw[i] * kernel(rule.nodes[i], rule.nodes[j]) * sw[j]);
        NystromSystem { rule, left_endpoint, matrix }
    }

    /// Same, for kernels known to be symmetric: only the upper triangle is
    /// evaluated and mirrored.
    pub fn new_symmetric<K: Fn(f64, f64) -> f64>(
        rule: QuadratureRule,
        left_endpoint: f64,
        kernel: K,
    ) -> Self {
        let n = rule.len();
        let sw: Vec<f64> = rule.weights.iter().map(|w| w.sqrt()).collect();
        let mut matrix = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = sw[i] * kernel(rule.nodes[i], rule.nodes[j]) * sw[j];
                matrix[(i, j)] = v;
                matrix[(j, i)] = v;
            }
        }
        NystromSystem { rule, left_endpoint, matrix }
    }

    pub fn from_matrix(rule: QuadratureRule, left_endpoint: f64, kernel_values: DMatrix<f64>) -> Self {
        let sw: Vec<f64> = rule.weights.iter().map(|w| w.sqrt()).collect();
        let n = rule.len();
        let matrix = DMatrix::from_fn(n, n, |i, j| sw[i] * kernel_values[(i, j)] * sw[j]);
        NystromSystem { rule, left_endpoint, matrix }
    }

    pub fn size(&self) -> usize {
        self.rule.len()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.size();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.matrix[(i, j)] - self.matrix[(j, i)]).abs());
            }
        }
        worst
    }

    fn check_finite(&self) -> Result<()> {
        if self.matrix.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(KpzError::Numeric("non-finite entry in Nyström matrix".into()))
        }
    }

    fn identity_minus(&self) -> DMatrix<f64> {
        let n = self.size();
        DMatrix::identity(n, n) - &self.matrix
    }

    /// Eigenvalues of the discretized operator (real parts first if the
    /// matrix is symmetric, in which case imaginary parts are zero).
    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        if self.max_asymmetry() <= 1e-13 * self.matrix.amax().max(1.0) {
            let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
            let mut ev: Vec<f64> = match symmetric_spectrum(&sym) {
                Ok((vals, _)) => vals.iter().copied().collect(),
                Err(_) => vec![f64::NAN; self.size()],
            };
            ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
            ev.into_iter().map(|v| Complex::new(v, 0.0)).collect()
        } else {
            let mut ev: Vec<Complex<f64>> = self.matrix.complex_eigenvalues().iter().copied().collect();
            ev.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
            ev
        }
    }

    /// Maps a sampled function f(x_i) to the symmetrized vector sqrt(w_i) f(x_i).
    pub fn to_weighted(&self, f: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            f.len(),
            f.iter().zip(&self.rule.weights).map(|(v, w)| v * w.sqrt()),
        )
    }

    /// Applies (1 - K) to samples f(x_i), returning samples.
    pub fn apply_identity_minus(&self, f: &[f64]) -> Vec<f64> {
        let v = self.identity_minus() * self.to_weighted(f);
        v.iter()
            .zip(&self.rule.weights)
            .map(|(x, w)| x / w.sqrt())
            .collect()
    }

    /// Integral of f g over the rule.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.rule
            .weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }
}

/// Symmetric eigen-decomposition. The matrix is normalized and entries below
/// 1e-40 of the largest are flushed to zero first: nalgebra's implicit QR
/// occasionally returns NaN on matrices with underflowing entries.
pub fn symmetric_spectrum(matrix: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = matrix.nrows();
    let amax = matrix.amax();
    if amax == 0.0 {
        return Ok((DVector::zeros(n), DMatrix::identity(n, n)));
    }
    for scale in [1.0 / amax, 1e3 / amax] {
        let m = matrix.map(|v| if v.abs() < 1e-40 * amax { 0.0 } else { v * scale });
        let eig = m.symmetric_eigen();
        if eig.eigenvalues.iter().all(|v| v.is_finite()) {
            return Ok((eig.eigenvalues / scale, eig.eigenvectors));
        }
    }
    Err(KpzError::Numeric("symmetric eigensolver returned non-finite values".into()))
}

/// For symmetric A with eigenpairs (mu_k, v_k): det(1 - A) and
/// det(1 - A) <a, (1 - A)^{-1} b> = sum_k (v_k.a)(v_k.b) prod_{j != k} (1 - mu_j).
/// Stays finite where 1 - A is numerically singular.
pub fn det_and_adjugate_form(
    matrix: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<(f64, f64)> {
    let (mu, vecs) = symmetric_spectrum(matrix)?;
    let one_minus: Vec<f64> = mu.iter().map(|m| 1.0 - m).collect();
    let det: f64 = one_minus.iter().product();
    let mut form = 0.0;
    for k in 0..one_minus.len() {
        let v = vecs.column(k);
        let others: f64 = one_minus
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, x)| x)
            .product();
        form += v.dot(a) * v.dot(b) * others;
    }
    Ok((det, form))
}

/// det(1 - K).
pub fn fredholm_det(system: &NystromSystem) -> Result<f64> {
    system.check_finite()?;
    let det = system.identity_minus().lu().determinant();
    if !det.is_finite() {
        return Err(KpzError::Numeric("determinant is not finite".into()));
    }
    Ok(det)
}

/// Nyström solution of (1 - K) f = rhs, sampled at the rule nodes.
pub fn resolvent_solve(system: &NystromSystem, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != system.size() {
        return Err(KpzError::Domain(format!(
            "rhs has {} samples, system has {} nodes",
            rhs.len(),
            system.size()
        )));
    }
    system.check_finite()?;
    let lu = system.identity_minus().lu();
    let det = lu.determinant();
    if !(det.abs() > 1e-12) {
        return Err(KpzError::Singular { det });
    }
    let b = system.to_weighted(rhs);
    let v = lu
        .solve(&b)
        .ok_or(KpzError::Singular { det })?;
    Ok(v.iter()
        .zip(&system.rule.weights)
        .map(|(x, w)| x / w.sqrt())
        .collect())
}

/// Sum_i w_i K(x_i, x_i).
pub fn operator_trace(system: &NystromSystem) -> Result<f64> {
    system.check_finite()?;
    Ok(system.matrix.trace())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_exact_for_polynomials() {
        for &n in &[8usize, 13, 64] {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() <= 1e-12 * exact.abs().max(1.0), "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn exponential_integral() {
        let r = build_semi_infinite_rule(0.0, 48, 4.0).unwrap();
        assert!((r.integrate(|x| (-x).exp()) - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn rule_rejects_bad_parameters() {
        assert!(build_semi_infinite_rule(0.0, 7, 4.0).is_err());
        assert!(build_semi_infinite_rule(0.0, 16, 0.0).is_err());
        assert!(build_semi_infinite_rule(0.0, 16, -1.0).is_err());
    }

    #[test]
    fn zero_kernel() {
        let r = build_semi_infinite_rule(0.0, 16, 4.0).unwrap();
        let sys = NystromSystem::new(r, 0.0, |_, _| 0.0);
        assert_eq!(fredholm_det(&sys).unwrap(), 1.0);
        assert_eq!(operator_trace(&sys).unwrap(), 0.0);
        let rhs: Vec<f64> = sys.rule.nodes.iter().map(|x| (-x).exp()).collect();
        let sol = resolvent_solve(&sys, &rhs).unwrap();
        for (a, b) in sol.iter().zip(&rhs) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn non_finite_matrix_is_an_error() {
        let r = build_semi_infinite_rule(0.0, 8, 4.0).unwrap();
        let sys = NystromSystem::new(r, 0.0, |x, _| if x > 1.0 { f64::NAN } else { 0.0 });
        assert!(fredholm_det(&sys).is_err());
    }

    #[test]
    fn singular_system_reports_determinant() {
        // K = phi phi^T with int phi^2 = 1 is a projection: det(1 - K) = 0.
        let r = build_semi_infinite_rule(0.0, 48, 4.0).unwrap();
        let sys = NystromSystem::new(r, 0.0, |x, y| 2.0 * (-x - y).exp());
        let rhs = vec![1.0; 48];
        match resolvent_solve(&sys, &rhs) {
            Err(KpzError::Singular { det }) => assert!(det.abs() <= 1e-12),
            other => panic!("expected singular error, got {other:?}"),
        }
    }
}
