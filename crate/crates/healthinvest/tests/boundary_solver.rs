//! Solver-level checks for the free-boundary curves: terminal value,
//! positivity, bounds, step-size convergence, residual quality, and
//! determinism, all through the public API.

use healthinvest::boundary::{solve_curve, solve_curve_refined, solve_surface, BoundaryCurve};
use healthinvest::dual::boundary_upper_bound;
use healthinvest::params::ModelParams;

fn reference_sup_errors(p: &ModelParams, h: f64, n: usize) -> (f64, f64) {
    let coarse = solve_curve(p, h, n / 2).unwrap();
    let mid = solve_curve(p, h, n).unwrap();
    let fine = solve_curve(p, h, 2 * n).unwrap();
    let im = mid.interpolant();
    let reference = fine.interpolant();
    let mut d1 = 0.0f64;
    let mut d2 = 0.0f64;
    for (&xi, &v) in coarse.xi_grid.iter().zip(&coarse.values) {
        if xi < 2.0 {
            continue;
        }
        let r = reference.eval(xi);
        d1 = d1.max((v - r).abs());
        d2 = d2.max((im.eval(xi) - r).abs());
    }
    (d1, d2)
}

#[test]
fn terminal_value_zero_and_interior_positive() {
    let p = ModelParams::default();
    for h in [2.0, 1000.0] {
        let curve = solve_curve(&p, h, 50).unwrap();
        assert_eq!(curve.values[0], 0.0, "h = {h}: value at zero time-to-maturity");
        for (j, &v) in curve.values.iter().enumerate().skip(1) {
            assert!(v > 0.0, "h = {h}: node {j} value {v}");
        }
    }
}

#[test]
fn curve_is_nondecreasing_in_time_to_maturity() {
    let p = ModelParams::default();
    for h in [2.0, 1000.0] {
        let curve = solve_curve(&p, h, 100).unwrap();
        for w in curve.values.windows(2) {
            assert!(w[1] >= w[0], "h = {h}: {} then {}", w[0], w[1]);
        }
    }
}

#[test]
fn curve_stays_below_the_dual_upper_bound() {
    let p = ModelParams::default();
    for h in [2.0, 1000.0] {
        let curve = solve_curve(&p, h, 100).unwrap();
        for (&xi, &v) in curve.xi_grid.iter().zip(&curve.values).skip(1) {
            let bound = boundary_upper_bound(&p, p.horizon - xi, h).unwrap();
            assert!(v <= bound, "h = {h}, xi = {xi}: {v} above bound {bound}");
            if xi >= 1.0 {
                assert!(v < bound, "h = {h}, xi = {xi}: interior node should be strict");
            }
        }
    }
}

#[test]
fn errors_against_a_fine_reference_shrink_under_step_halving() {
    let p = ModelParams::default();
    for h in [2.0, 1000.0] {
        for n in [50usize, 100] {
            let (d1, d2) = reference_sup_errors(&p, h, n);
            assert!(d2 < d1, "h = {h}, n = {n}: sup errors {d1} then {d2}");
        }
    }
}

#[test]
fn refined_residuals_stay_within_the_node_tolerance() {
    let p = ModelParams::default();
    let curve = solve_curve_refined(&p, 1000.0, 200, 8).unwrap();
    let mut worst = 0.0f64;
    for (j, &res) in curve.residuals.iter().enumerate() {
        let tol = 1e-4 * p.invest_amount * curve.values[j].max(curve.values[1]) / p.r;
        assert!(res.abs() <= tol, "node {j}: residual {res} vs tolerance {tol}");
        worst = worst.max(res.abs());
    }
    // The scheme is accurate well beyond the acceptance tolerance; a
    // gross regression would show up here first.
    assert!(worst < 1e-2, "worst refined residual {worst}");
}

#[test]
fn interpolant_reproduces_the_solved_nodes() {
    let p = ModelParams::default();
    let curve = solve_curve(&p, 2.0, 60).unwrap();
    let interp = curve.interpolant();
    for (&xi, &v) in curve.xi_grid.iter().zip(&curve.values) {
        assert!((interp.eval(xi) - v).abs() <= 1e-12 * (1.0 + v.abs()), "xi = {xi}");
    }
}

#[test]
fn dual_boundary_is_nearly_insensitive_to_health() {
    let p = ModelParams::default();
    let sick = solve_curve(&p, 2.0, 100).unwrap();
    let healthy = solve_curve(&p, 1000.0, 100).unwrap();
    let mut sup_rel = 0.0f64;
    for (j, (&a, &b)) in sick.values.iter().zip(&healthy.values).enumerate() {
        if j == 0 {
            continue;
        }
        sup_rel = sup_rel.max((a - b).abs() / b);
    }
    assert!(sup_rel < 5e-3, "sup relative spread {sup_rel}");
    assert!(sup_rel > 0.0, "curves should not be identical");
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let p = ModelParams::default();
    let a: BoundaryCurve = solve_curve_refined(&p, 1000.0, 60, 4).unwrap();
    let b: BoundaryCurve = solve_curve_refined(&p, 1000.0, 60, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_requests_are_rejected() {
    let p = ModelParams::default();
    assert!(solve_curve(&p, 2.0, 1).is_err());
    assert!(solve_curve(&p, 0.0, 50).is_err());
    assert!(solve_curve(&p, -3.0, 50).is_err());
    assert!(solve_surface(&p, &[], 50).is_err());
}
