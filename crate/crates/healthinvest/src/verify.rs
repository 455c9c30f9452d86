//! Machine-readable invariant suite: every computed object is checked
//! against an independent oracle (Monte Carlo, finite differences, a
//! dense scan, or a coupled step-halving study) at the grid scale of the
//! supplied configuration, and the results are collected into a
//! pass/fail report with measured values.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::boundary::{solve_curve, solve_surface, BoundaryError, PreInvestTables};
use crate::dual::{u_hat, PostInvestCache};
use crate::health::{health_post, integrated_mortality_post, mortality};
use crate::params::{ModelParams, RunConfig};
use crate::policy::{PolicyError, PolicyEvaluator};
use crate::sim::{simulate_closed_loop, simulate_identity_gap, SimConfig, SimError};
use crate::value::{PointEvaluator, ValueError};

/// One invariant check: what was measured, the bound it must satisfy,
/// and whether it did.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured value across the points the check visited.
    pub measured: f64,
    /// Bound the measured value must stay within.
    pub bound: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, measured: f64, bound: f64, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed: measured <= bound, measured, bound, detail }
    }
}

/// Full suite outcome.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub wall_time_s: f64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failing(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Errors that prevent the suite from running at all (as opposed to
/// invariant failures, which are reported in the `VerifyReport`).
#[derive(Debug)]
pub enum VerifyError {
    Boundary(BoundaryError),
    Value(ValueError),
    Policy(PolicyError),
    Sim(SimError),
}

impl fmt::Display for VerifyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyError::Boundary(e) => write!(f, "{e}"),
            VerifyError::Value(e) => write!(f, "{e}"),
            VerifyError::Policy(e) => write!(f, "{e}"),
            VerifyError::Sim(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for VerifyError {}

impl From<BoundaryError> for VerifyError {
    fn from(e: BoundaryError) -> Self {
        VerifyError::Boundary(e)
    }
}
impl From<ValueError> for VerifyError {
    fn from(e: ValueError) -> Self {
        VerifyError::Value(e)
    }
}
impl From<PolicyError> for VerifyError {
    fn from(e: PolicyError) -> Self {
        VerifyError::Policy(e)
    }
}
impl From<SimError> for VerifyError {
    fn from(e: SimError) -> Self {
        VerifyError::Sim(e)
    }
}

/// Monte Carlo estimate of the closed-form post-investment value from
/// its defining expectation: the integral of the survival-discounted
/// dual utility along the exact lognormal multiplier and the
/// deterministic post-investment health flow. Returns (mean, SE).
fn mc_post_value(
    params: &ModelParams,
    z: f64,
    h: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> (f64, f64) {
    let p = *params;
    let theta = p.theta();
    let dt = p.horizon / n_steps as f64;
    let mut disc = vec![0.0; n_steps + 1];
    let mut drift = vec![0.0; n_steps + 1];
    let mut h2 = vec![0.0; n_steps + 1];
    for k in 0..=n_steps {
        let s = k as f64 * dt;
        let im2 = integrated_mortality_post(&p, h, s).expect("grid time within horizon");
        disc[k] = (-(p.rho * s + im2)).exp();
        drift[k] = (p.rho - p.r) * s + im2 - 0.5 * theta * theta * s;
        h2[k] = health_post(&p, h, s);
    }
    let sums: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let mut bm = 0.0f64;
            let mut acc = 0.0f64;
            let mut prev = disc[0] * u_hat(&p, z, h2[0]);
            for k in 1..=n_steps {
                bm += dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let zk = z * (drift[k] - theta * bm).exp();
                let f = disc[k] * u_hat(&p, zk, h2[k]);
                acc += 0.5 * (prev + f) * dt;
                prev = f;
            }
            acc
        })
        .collect();
    let n = n_paths as f64;
    let mean = sums.iter().sum::<f64>() / n;
    let var = sums.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn worst(acc: &mut (f64, String), value: f64, detail: impl FnOnce() -> String) {
    if value > acc.0 {
        acc.0 = value;
        acc.1 = detail();
    }
}

/// Runs every invariant check at the scale of `cfg` and collects the
/// report. Solver-level failures (as opposed to failed invariants)
/// surface as errors.
pub fn run_invariant_suite(cfg: &RunConfig) -> Result<VerifyReport, VerifyError> {
    let start = Instant::now();
    let p = cfg.model;
    let grid = &cfg.grid;
    let h_lo = grid.h_values[0];
    let h_hi = *grid.h_values.last().unwrap();
    let mut checks = Vec::new();

    // Closed form vs Monte Carlo for the post-investment value.
    {
        let mut acc = (0.0, String::new());
        for &h in &[h_lo, h_hi] {
            let cache = PostInvestCache::new(&p, h);
            for &z in &[0.5, 2.0] {
                let (mc, se) = mc_post_value(&p, z, h, 20_000, 200, cfg.sim.seed);
                let gap = (cache.w(0.0, z) - mc).abs() / se.max(1e-300);
                worst(&mut acc, gap, || format!("z = {z}, h = {h}: {} vs {mc} (SE {se})", cache.w(0.0, z)));
            }
        }
        checks.push(CheckResult::new("closed_form_value_matches_monte_carlo", acc.0, 3.0, acc.1));
    }

    // Closed-form derivatives vs centered finite differences.
    {
        let mut acc = (0.0, String::new());
        for &h in &[h_lo, h_hi] {
            let dh = 1e-4 * h;
            let caches: Vec<PostInvestCache> =
                [h - dh, h, h + dh].iter().map(|&hh| PostInvestCache::new(&p, hh)).collect();
            for &t in &[0.3 * p.horizon, 0.6 * p.horizon] {
                let dt = 1e-5 * p.horizon;
                for &z in &[0.5, 2.0] {
                    let dz = 1e-4 * z;
                    let b = caches[1].w_partials(t, z);
                    let fd_z = (caches[1].w(t, z + dz) - caches[1].w(t, z - dz)) / (2.0 * dz);
                    let fd_t = (caches[1].w(t + dt, z) - caches[1].w(t - dt, z)) / (2.0 * dt);
                    let fd_h = (caches[2].w(t, z) - caches[0].w(t, z)) / (2.0 * dh);
                    let wh = |c: &PostInvestCache| c.w_partials(t, z).w_h;
                    let fd_hh = (wh(&caches[2]) - wh(&caches[0])) / (2.0 * dh);
                    let fd_hz = (caches[1].w_partials(t, z + dz).w_h
                        - caches[1].w_partials(t, z - dz).w_h)
                        / (2.0 * dz);
                    let fd_ht = (caches[1].w_partials(t + dt, z).w_h
                        - caches[1].w_partials(t - dt, z).w_h)
                        / (2.0 * dt);
                    for (name, exact, fd) in [
                        ("w_z", b.w_z, fd_z),
                        ("w_t", b.w_t, fd_t),
                        ("w_h", b.w_h, fd_h),
                        ("w_hh", b.w_hh, fd_hh),
                        ("w_hz", b.w_hz, fd_hz),
                        ("w_ht", b.w_ht, fd_ht),
                    ] {
                        let rel = (exact - fd).abs() / exact.abs().max(1e-12);
                        worst(&mut acc, rel, || format!("{name} at t = {t}, z = {z}, h = {h}: {exact} vs {fd}"));
                    }
                }
            }
        }
        checks.push(CheckResult::new("value_derivatives_match_finite_differences", acc.0, 1e-4, acc.1));
    }

    // PDE residual of the closed form, relative to the dominant term.
    {
        let mut acc = (0.0, String::new());
        for &h in &[h_lo, h_hi] {
            let cache = PostInvestCache::new(&p, h);
            for &t in &[0.2 * p.horizon, 0.5 * p.horizon, 0.8 * p.horizon] {
                for &z in &[0.5, 1.0, 2.0] {
                    let b = cache.w_partials(t, z);
                    let m = mortality(&p, h);
                    let theta = p.theta();
                    let terms = [
                        b.w_t,
                        0.5 * theta * theta * z * z * cache.w_zz(t, z),
                        (p.rho - p.r + m) * z * b.w_z,
                        (-p.delta * h + p.f_of_i()) * b.w_h,
                        -(p.rho + m) * b.w,
                        u_hat(&p, z, h),
                    ];
                    let residual: f64 = terms.iter().sum();
                    let dominant = terms.iter().fold(0.0f64, |a, t| a.max(t.abs()));
                    let rel = residual.abs() / dominant;
                    worst(&mut acc, rel, || format!("t = {t}, z = {z}, h = {h}: residual {residual}"));
                }
            }
        }
        checks.push(CheckResult::new("value_pde_residual_small", acc.0, 1e-6, acc.1));
    }

    // Boundary validity at the configured resolution: zero at maturity,
    // below the stopping bound, and with small refined residuals.
    let surface = solve_surface(&p, &grid.h_values, grid.n_steps)?;
    {
        let mut acc = (0.0, String::new());
        for curve in &surface.curves {
            let tables = PreInvestTables::new(&p, curve.h_ref, grid.n_steps, 512);
            if curve.values[0] != 0.0 {
                worst(&mut acc, f64::INFINITY, || format!("h = {}: first node {}", curve.h_ref, curve.values[0]));
            }
            for (i, (&b, &res)) in curve.values.iter().zip(&curve.residuals).enumerate() {
                let bound = tables.upper_bound_at(i);
                if b > bound * (1.0 + 1e-12) {
                    worst(&mut acc, f64::INFINITY, || format!("h = {}: node {i} has b = {b} above bound {bound}", curve.h_ref));
                }
                if i > 0 {
                    let tol = 1e-4 * (p.invest_amount * b / p.r);
                    worst(&mut acc, res.abs() / tol.max(1e-300), || {
                        format!("h = {}: node {i} residual {res} vs tolerance {tol}", curve.h_ref)
                    });
                }
            }
        }
        checks.push(CheckResult::new("boundary_zero_bound_and_residuals", acc.0, 1.0, acc.1));
    }

    // Grid convergence: against the finest curve as reference, halving
    // the step size must shrink the sup error. Probe nodes stay away from
    // the near-square-root corner at xi -> 0, where node-anchored
    // differences measure local resolution rather than convergence.
    {
        let mut acc = (0.0f64, String::new());
        for &h in &[h_lo, h_hi] {
            let n = grid.n_steps.clamp(8, 60);
            let coarse = solve_curve(&p, h, n / 2)?;
            let mid = solve_curve(&p, h, n)?;
            let fine = solve_curve(&p, h, 2 * n)?;
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
            worst(&mut acc, d2 / d1.max(1e-300), || format!("h = {h}: sup errors {d1} then {d2}"));
        }
        checks.push(CheckResult::new("boundary_grid_convergence", acc.0, 1.0, acc.1));
    }

    // Value envelope on the configured lattice: nonnegative, below the
    // perpetuity cap, nondecreasing in z, small on the boundary, zero at
    // the horizon.
    let evals: Vec<PointEvaluator> = surface
        .curves
        .iter()
        .map(|c| PointEvaluator::with_refine(&p, c, surface.meta.residual_refine))
        .collect::<Result<_, _>>()?;
    {
        let mut acc = (0.0, String::new());
        let t_grid: Vec<f64> =
            (0..grid.n_t).map(|i| i as f64 * p.horizon / (grid.n_t - 1) as f64).collect();
        let z_grid: Vec<f64> = (0..grid.n_z)
            .map(|i| {
                grid.z_min * (grid.z_max / grid.z_min).powf(i as f64 / (grid.n_z - 1) as f64)
            })
            .collect();
        let cap_scale = p.invest_amount * grid.z_max / p.r;
        let slack = 1e-8 * (1.0 + cap_scale);
        for point in &evals {
            let h = point.h();
            for &t in &t_grid {
                let mut prev = 0.0f64;
                for &z in &z_grid {
                    let v = point.j_hat(t, z);
                    let cap = p.invest_amount * z / p.r
                        * (1.0 - (-p.r * (p.horizon - t)).exp());
                    let viol = (-v).max(v - cap).max(prev - v);
                    worst(&mut acc, viol / slack, || format!("t = {t}, z = {z}, h = {h}: j_hat = {v}, cap = {cap}"));
                    prev = v;
                }
                if t < p.horizon {
                    let b = point.boundary_at(t);
                    if b > 0.0 {
                        let tol = 10.0 * 1e-4 * (p.invest_amount * b / p.r);
                        let v = point.j_hat(t, b);
                        worst(&mut acc, v.abs() / tol, || {
                            format!("on-boundary value {v} at t = {t}, h = {h} vs tolerance {tol}")
                        });
                    }
                }
            }
        }
        checks.push(CheckResult::new("value_envelope_and_regions", acc.0, 1.0, acc.1));
    }

    // Convexity of the dual value, multiplier round trip, and agreement
    // of the primal value with a dense dual scan.
    {
        let mut acc = (0.0, String::new());
        let policies: Vec<PolicyEvaluator> = grid
            .h_values
            .iter()
            .map(|&h| PolicyEvaluator::new(&p, &surface, h))
            .collect::<Result<_, _>>()?;
        for eval in &policies {
            let point = eval.point();
            let h = eval.h();
            for &t in &[0.1 * p.horizon, 0.6 * p.horizon] {
                for &z in &[0.3, 1.0, 3.0] {
                    let scale = point.post().w_zz(t, z).abs().max(1.0);
                    let jzz = point.j_zz(t, z);
                    worst(&mut acc, -jzz / (1e-6 * scale), || format!("j_zz = {jzz} at t = {t}, z = {z}, h = {h}"));
                }
                let x = 0.5 * (grid.x_min + grid.x_max);
                let zs = eval.z_star(t, x)?;
                let round = (point.j_z(t, zs) + x).abs() / (1e-6 * (1.0 + x));
                worst(&mut acc, round, || format!("round trip residual at t = {t}, x = {x}, h = {h}"));
                let pol = eval.policy(t, x)?;
                let mut best = f64::INFINITY;
                let b0 = point.boundary_at(t).max(1e-6);
                for i in 0..4000 {
                    let z = 1e-3 * b0 * (1e6f64).powf(i as f64 / 3999.0);
                    best = best.min(point.j(t, z) + x * z);
                }
                let rel = (pol.v - best).abs() / best.abs().max(1e-12) / 1e-4;
                worst(&mut acc, rel, || format!("primal {} vs dense scan {best} at t = {t}, h = {h}", pol.v));
            }
        }
        checks.push(CheckResult::new("dual_convexity_and_primal_round_trip", acc.0, 1.0, acc.1));
    }

    // Optimality of the stopping rule: quadrature value dominates Monte
    // Carlo payoffs of perturbed boundary rules within 2 SE.
    {
        let mut acc = (0.0, String::new());
        for point in &evals {
            let h = point.h();
            let t = 0.2 * p.horizon;
            let z = 1.5 * point.boundary_at(t);
            let exact = point.j_hat(t, z);
            for scale in [0.9, 1.1] {
                let (mc, se) = point.mc_stopped_payoff(t, z, scale, 2000, 200, cfg.sim.seed);
                let deficit = (mc - 2.0 * se - exact) / (1.0 + exact.abs());
                worst(&mut acc, deficit, || {
                    format!("rule {scale} b: MC {mc} (SE {se}) vs exact {exact} at h = {h}")
                });
            }
        }
        checks.push(CheckResult::new("stopping_rule_dominates_perturbations", acc.0, 0.0, acc.1));
    }

    // Wealth-multiplier identity under coupled step halving.
    {
        let point = PointEvaluator::with_refine(
            &p,
            surface.curve_for(h_hi).expect("h node present"),
            surface.meta.residual_refine,
        )?;
        let z0 = 2.0 * point.boundary_at(0.0);
        let study = simulate_identity_gap(&point, z0, 20, 256, cfg.sim.seed);
        let mut measured = study.extrapolated_mean() / (0.05 * study.x0);
        if study.fine_mean >= study.coarse_mean {
            measured = f64::INFINITY;
        }
        checks.push(CheckResult::new(
            "wealth_tracks_dual_multiplier",
            measured,
            1.0,
            format!(
                "mean gap {} -> {} under halving, extrapolated {}, x0 = {}",
                study.coarse_mean,
                study.fine_mean,
                study.extrapolated_mean(),
                study.x0
            ),
        ));
    }

    // Determinism: identical seeds reproduce solver output and
    // simulation bundles exactly.
    {
        let sim_cfg = SimConfig {
            n_paths: 20,
            n_steps: 64,
            seed: cfg.sim.seed,
            initial_health: h_hi,
            ..SimConfig::default()
        };
        let a = simulate_closed_loop(&p, &surface, &sim_cfg)?;
        let b = simulate_closed_loop(&p, &surface, &sim_cfg)?;
        let c1 = solve_curve(&p, h_hi, grid.n_steps.min(40))?;
        let c2 = solve_curve(&p, h_hi, grid.n_steps.min(40))?;
        let same = a == b && c1.values == c2.values;
        checks.push(CheckResult::new(
            "fixed_seed_reproduces_results",
            if same { 0.0 } else { 1.0 },
            0.5,
            format!("{} paths and {} boundary nodes compared", sim_cfg.n_paths, c1.values.len()),
        ));
    }

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { passed, wall_time_s: start.elapsed().as_secs_f64(), checks })
}

/// Serializes the report as pretty JSON.
pub fn write_report_json<W: Write>(report: &VerifyReport, mut out: W) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    out.write_all(text.as_bytes())?;
    out.write_all(b"\n")
}

/// Reads a CSV written by this crate back into headers and numeric rows,
/// skipping '#'-prefixed manifest comment lines. Non-numeric cells
/// (booleans, labels) parse as NaN.
pub fn read_numeric_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| e.to_string())?;
        if record.len() != headers.len() {
            return Err(format!("row has {} cells, header has {}", record.len(), headers.len()));
        }
        rows.push(record.iter().map(|cell| cell.parse::<f64>().unwrap_or(f64::NAN)).collect());
    }
    Ok((headers, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_reader_skips_comments_and_parses_numbers() {
        let text = "# manifest: run 1\n# seed: 42\na,b,flag\n1.5,2e-3,true\n-4,5,false\n";
        let (headers, rows) = read_numeric_csv(text).unwrap();
        assert_eq!(headers, vec!["a", "b", "flag"]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0][0], 1.5);
        assert_eq!(rows[0][1], 2e-3);
        assert!(rows[0][2].is_nan());
        assert_eq!(rows[1][0], -4.0);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = read_numeric_csv("a,b\n1\n").unwrap_err();
        assert!(err.contains("cells"), "{err}");
    }

    #[test]
    fn report_serializes_with_check_names() {
        let report = VerifyReport {
            passed: false,
            wall_time_s: 1.0,
            checks: vec![CheckResult::new("sample_check", 2.0, 1.0, "测".into())],
        };
        let mut out = Vec::new();
        write_report_json(&report, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("sample_check"));
        assert!(text.contains("\"passed\": false"));
        assert_eq!(report.failing().count(), 1);
    }

    #[test]
    fn mc_post_value_matches_closed_form_loosely() {
        let p = ModelParams::default();
        let cache = PostInvestCache::new(&p, 1000.0);
        let (mc, se) = mc_post_value(&p, 1.0, 1000.0, 4000, 100, 11);
        let exact = cache.w(0.0, 1.0);
        assert!((exact - mc).abs() < 4.0 * se + 5e-3 * exact.abs(), "{exact} vs {mc} ({se})");
    }
}
