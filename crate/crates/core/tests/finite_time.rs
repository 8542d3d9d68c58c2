use kpz_core::airy_limit::{f_gue, limit_cdf, uniform_grid, LimitLawRequest};
use kpz_core::finite_time::*;
use kpz_core::fredholm::{fredholm_det, operator_trace};
use kpz_core::KpzError;
use nalgebra::Complex;

#[test]
fn frame_at_half_density() {
    let f = make_frame(0.5, 100.0, 0.0, 0.0).unwrap();
    assert_eq!((f.chi, f.a, f.m, f.d, f.u), (0.25, 0.0, 25.0, 0.0, 100.0));
    for t in [10.0, 37.0, 400.0] {
        for s in [-3.0, 0.0, 2.5] {
            assert_eq!(make_frame(0.5, t, 0.0, s).unwrap().d, 0.0);
        }
    }
}

#[test]
fn frame_matches_independent_arithmetic() {
    let (rho, t, w, s) = (0.4f64, 200.0f64, 0.5f64, 1.0f64);
    let f = make_frame(rho, t, w, s).unwrap();
    let chi = rho - rho * rho;
    let k = chi.powf(1.0 / 3.0) * t.powf(2.0 / 3.0);
    let m = (t - 2.0 * chi * t) / 2.0 + w * (1.0 - 2.0 * rho) * k;
    let d = (t - 2.0 * rho * t) / 2.0 + w * k;
    let u = t + s * (t / chi).powf(1.0 / 3.0);
    for (a, b) in [(f.m, m), (f.d, d), (f.u, u), (f.chi, chi), (f.a, 0.1)] {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
    assert!(f.m - f.d > 0.0 && f.m + f.d > 0.0);
}

#[test]
fn g1_identity() {
    assert!(g1(&make_frame(0.5, 100.0, 0.3, 0.0).unwrap()).unwrap().abs() <= 1e-9);
    let v = g1(&make_frame(0.5, 100.0, 0.3, 2.0).unwrap()).unwrap();
    assert!((v - 2.0 * 400.0f64.cbrt()).abs() <= 1e-9 * v);
    let f = make_frame(0.35, 140.0, -0.4, 1.5).unwrap();
    let direct = f.u + (2.0 * f.a * f.d - f.m) / (0.25 - f.a * f.a);
    assert!((g1(&f).unwrap() - direct).abs() <= 1e-12 * direct.abs());
}

#[test]
fn critical_points_on_the_circle() {
    let gamma: f64 = 1.7;
    let zc = 1.0 / (1.0 + gamma.sqrt());
    let (p, m) = critical_points_at((1.0 + gamma.sqrt()).powi(2), gamma);
    assert!((p.re - zc).abs() <= 1e-12 && (m.re - zc).abs() <= 1e-12);
    let up = 1.0 + gamma;
    let (p, m) = critical_points_at(up, gamma);
    assert!((p.norm() - 1.0 / up.sqrt()).abs() <= 1e-12);
    assert!((p.conj() - m).norm() <= 1e-15);
    for z in [p, m] {
        let one = Complex::new(1.0, 0.0);
        let deriv = -z.inv() + up - (one - z).inv() * gamma;
        assert!(deriv.norm() <= 1e-10, "{deriv}");
    }
}

#[test]
fn l_kernel_is_real_and_converged() {
    let f = make_frame(0.5, 50.0, 0.3, 0.0).unwrap();
    for (x, y) in [(52.0, 50.5), (60.0, 41.0), (49.3, 48.0)] {
        assert!(kernel_l_imaginary_residue(&f, x, y).unwrap() <= 1e-8);
        let a = kernel_l_points(&f, x, y, 256).unwrap();
        let b = kernel_l_points(&f, x, y, 512).unwrap();
        assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
    }
    assert!(matches!(kernel_l(&f, 1.0, 2.0), Err(KpzError::Domain(_))));
    assert!(matches!(kernel_r(&f, 2.0, 1.0), Err(KpzError::Domain(_))));
}

#[test]
fn kernel_identities_in_their_residue_regime() {
    // no residue at infinity: L needs m + d > m - d, R needs the reverse
    let left = make_frame(0.4, 50.0, 0.3, 0.0).unwrap();
    assert!(left.lattice().site > 0);
    let right = make_frame(0.6, 50.0, 0.3, 0.0).unwrap();
    assert!(right.lattice().site < 0);
    for dx in [0.0, 5.0, -5.0] {
        let l = kernel_identity_residuals(&left, left.u + dx).unwrap();
        assert!(l.l_relative.abs() <= 1e-6, "{l:?}");
        let r = kernel_identity_residuals(&right, right.u + dx).unwrap();
        assert!(r.r_relative.abs() <= 1e-6, "{r:?}");
    }
}

#[test]
fn composed_kernel_matches_laguerre_form_and_converges() {
    let f = make_frame(0.5, 50.0, 0.0, 0.0).unwrap();
    let u = f.lattice_u();
    let a = kernel_k_md_with(&f, u + 1.0, u + 2.0, 64).unwrap();
    let b = kernel_k_md_with(&f, u + 1.0, u + 2.0, 128).unwrap();
    assert!((a - b).abs() <= 1e-7 * b.abs());
    let lue = kernel_lue(&f, u + 1.0, u + 2.0).unwrap();
    assert!((a - lue).abs() <= 1e-7 * lue.abs(), "{a} vs {lue}");
    let op = FiniteOperator::new(&f, 64, 4.0).unwrap();
    let det = op.det().unwrap();
    assert!(det > 0.0 && det <= 1.0);
    for ev in op.system.eigenvalues() {
        assert!(ev.re > -1e-8 && ev.re < 1.0 + 1e-8);
    }
}

#[test]
fn finite_f_properties() {
    let deep = make_frame(0.5, 100.0, 0.0, -10.0).unwrap();
    assert!(finite_F(&deep).unwrap() <= (-0.9 * finite_trace(&deep).unwrap()).exp());
    let far = make_frame(0.5, 200.0, 0.0, 6.0).unwrap();
    assert!((finite_F(&far).unwrap() - f_gue(6.0, 64).unwrap()).abs() <= 0.05);
    let mut prev = 0.0;
    for s in -4..=4 {
        let v = finite_F(&make_frame(0.5, 100.0, 0.3, s as f64).unwrap()).unwrap();
        assert!(v > prev);
        prev = v;
    }
}

#[test]
fn widom_chain() {
    for s in [-4.0, -2.0, 0.0] {
        let op = FiniteOperator::new(&make_frame(0.5, 100.0, 0.3, s).unwrap(), 64, default_map_scale(s)).unwrap();
        let det = fredholm_det(&op.system).unwrap();
        assert!(det <= (-operator_trace(&op.system).unwrap()).exp() + 1e-15);
    }
}

#[test]
fn h_functions_decay_and_shift() {
    let f = make_frame(0.5, 50.0, 0.3, 0.0).unwrap();
    let ys: Vec<f64> = (0..=12).map(|k| 0.5 * k as f64).collect();
    let h: Vec<f64> = ys.iter().map(|&y| h_t(&f, y).unwrap()).collect();
    assert!(h.windows(2).all(|p| p[1].abs() < p[0].abs()));
    let logs: Vec<f64> = h.iter().map(|v| v.abs().ln()).collect();
    let n = ys.len() as f64;
    let (mx, my) = (ys.iter().sum::<f64>() / n, logs.iter().sum::<f64>() / n);
    let slope = ys.iter().zip(&logs).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / ys.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!(-slope >= 1.0, "fitted rate {}", -slope);

    let shifted = f.with_s(1.0).unwrap();
    for y in [0.0, 1.5, 3.0] {
        let a = h_t(&shifted, y).unwrap();
        let b = h_t(&f, y + 1.0).unwrap();
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        assert!(h_tilde_t(&f, y).unwrap().is_finite());
    }
    assert!(h_t(&f, -1.0).is_err());
}

#[test]
fn g2_reduction_and_decay() {
    let f = make_frame(0.5, 50.0, 0.3, 0.0).unwrap();
    let reduced = g2(&f).unwrap();
    let tensor = g2_tensor(&f, 64).unwrap();
    assert!((reduced - tensor).abs() <= 1e-6, "{reduced} vs {tensor}");
    let a = g2_with(&f, 64).unwrap();
    let b = g2_with(&f, 128).unwrap();
    assert!((a - b).abs() <= 1e-7);
    let at = |s: f64| {
        let fr = f.with_s(s).unwrap();
        (g2(&fr).unwrap() / fr.scale()).abs()
    };
    assert!(at(6.0) <= (-2.0f64).exp() * at(2.0));
}

#[test]
fn g3_bound_decay_and_convergence() {
    let f = make_frame(0.5, 50.0, 0.3, 0.0).unwrap();
    let (inner, bound) = g3_cauchy_schwarz(&f).unwrap();
    assert!(inner <= bound);
    let a = g3_with(&f, 64, 512).unwrap();
    let b = g3_with(&f, 128, 1024).unwrap();
    assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    let at = |s: f64| {
        let fr = f.with_s(s).unwrap();
        (g3(&fr).unwrap() / fr.scale()).abs()
    };
    assert!(at(6.0) <= (-2.0f64).exp() * at(2.0));
}

#[test]
fn negative_w_is_unsupported() {
    let f = make_frame(0.5, 50.0, -0.3, 0.0).unwrap();
    assert!(matches!(g2(&f), Err(KpzError::Unsupported(_))));
    assert!(matches!(g3(&f), Err(KpzError::Unsupported(_))));
}

#[test]
fn finite_cdf_near_limit_law() {
    let grid = uniform_grid(-6.0, 5.0, 0.25);
    let finite = finite_cdf(0.5, 200.0, 0.3, &grid).unwrap();
    let limit = limit_cdf(&LimitLawRequest::standard(0.3)).unwrap();
    let sup = grid
        .iter()
        .zip(&finite.cdf)
        .map(|(&s, c)| (c - limit.cdf_at(s)).abs())
        .fold(0.0, f64::max);
    assert!(sup <= 0.08, "sup distance {sup}");
    assert!((finite.moments[0] - 1.0).abs() <= 1e-3);
}

#[test]
fn trace_formulas_agree() {
    let f = make_frame(0.5, 100.0, 0.0, -6.0).unwrap();
    let diag = finite_trace(&f).unwrap();
    let an = trace_analysis(&f, CONTOUR_POINTS).unwrap();
    let contour = an.trace_value.unwrap();
    assert!(contour >= 0.0);
    assert!(((diag - contour) / diag).abs() <= 1e-4, "{diag} vs {contour}");
    let t10 = finite_trace(&f.with_s(-10.0).unwrap()).unwrap();
    let t5 = finite_trace(&f.with_s(-5.0).unwrap()).unwrap();
    assert!(t10 >= 2.0f64.powf(1.5) * 0.5 * t5);
}

#[test]
fn touching_contours_rejected() {
    let an = critical_points(&make_frame(0.5, 100.0, 0.0, 0.0).unwrap()).unwrap();
    let a = ContourSpec { center: 0.0, radius: 0.6, n_points: 64 };
    let b = ContourSpec { center: 1.0, radius: 0.6, n_points: 64 };
    assert!(matches!(trace_double_contour(&an, (a, b)), Err(KpzError::Config(_))));
}
