//! Free-boundary solver: recursive integration of the Volterra-type
//! integral equation satisfied by the dual investment boundary.
//!
//! The boundary in dual coordinates, written over time-to-maturity xi as
//! b_bar(xi) = b(T - xi, h), solves
//!
//!   0 = integral over s in [0, xi] of G(xi, s, b_bar(xi), b_bar(xi - s)) ds
//!
//! with b_bar(0) = 0. The kernel G is the expected discounted local gain of
//! waiting, reduced to two normal tail weights because the dual state is
//! lognormal. Discretizing the integral by trapezoid on a uniform xi-mesh
//! turns the equation into a triangular system: stage k depends only on
//! stages 0..k-1 through the integral, and on b_bar(xi_k) algebraically, so
//! each stage is one bracketed root-find.
//!
//! Every curve holds its reference health fixed: the mortality drift, the
//! normalization factors, and the decay base of the Gamma substitution all
//! use h_ref, and future boundary values inside the kernel come from the
//! same curve. The stopped-value quadrature and the simulators use the same
//! convention, so solver and verification layers agree exactly.

use rayon::prelude::*;
use std::cell::RefCell;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use crate::dual::{GammaTable, PostInvestCache};
use crate::health::integrated_mortality_pre;
use crate::num::{find_root, normal_cdf, BracketSpec, NumError, Pchip, RootMethod};
use crate::params::ModelParams;

/// Interval count of the per-health Gamma tables backing the kernel. The
/// boundary itself is resolved to ~1e-10, two orders above this table's
/// truncation, and hundreds of tables are built per curve.
pub const KERNEL_CACHE_INTERVALS: usize = 2048;

/// Mesh-refinement factor used for the stored per-node residuals.
pub const DEFAULT_RESIDUAL_REFINE: u32 = 4;

const BRACKET_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryError {
    Invalid(String),
    /// Stage-k bisection could not bracket a root even after one upward
    /// extension; carries the bracket and the stage-function values there.
    Stage { k: usize, xi: f64, lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    /// A per-health solve inside a surface failed.
    AtHealth { h: f64, source: Box<BoundaryError> },
}

impl fmt::Display for BoundaryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryError::Invalid(msg) => write!(f, "invalid boundary request: {msg}"),
            BoundaryError::Stage { k, xi, lo, hi, f_lo, f_hi } => write!(
                f,
                "stage {k} (xi = {xi}): no sign change on [{lo}, {hi}], stage function [{f_lo}, {f_hi}]"
            ),
            BoundaryError::AtHealth { h, source } => write!(f, "curve at h = {h}: {source}"),
        }
    }
}

impl std::error::Error for BoundaryError {}

/// Discount and drift factors of the pre-investment flow at elapsed time s:
/// everything in the kernel that does not involve boundary values.
pub(crate) struct FlowFactors {
    /// e^{-(rho s + int_0^s M1_u du)}.
    disc: f64,
    /// exp{(alpha/(alpha-1)) int_0^s (rho - r + M1_u - theta^2/2) du
    ///     + alpha^2 theta^2 s / (2 (alpha-1)^2)}.
    n1: f64,
    /// exp{int_0^s (rho - r + M1_u) du}.
    n2: f64,
    /// Drift shift of the first tail weight:
    /// (rho - r) s + int M1 + theta^2 s / 2.
    a1: f64,
    /// Drift shift of the second tail weight:
    /// (rho - r) s + int M1 + alpha theta^2 s/(alpha-1) - theta^2 s / 2.
    a2: f64,
}

pub(crate) fn flow_factors(params: &ModelParams, h: f64, s: f64) -> FlowFactors {
    let theta = params.theta();
    let im1 = integrated_mortality_pre(params, h, s);
    let base = (params.rho - params.r) * s + im1;
    let am1 = params.alpha - 1.0;
    FlowFactors {
        disc: (-(params.rho * s + im1)).exp(),
        n1: (params.alpha / am1 * (base - 0.5 * theta * theta * s)
            + params.alpha * params.alpha * theta * theta * s / (2.0 * am1 * am1))
            .exp(),
        n2: base.exp(),
        a1: base + 0.5 * theta * theta * s,
        a2: base + params.alpha * theta * theta * s / am1 - 0.5 * theta * theta * s,
    }
}

/// The integral-equation kernel G(xi, s, b_xi, b_xi_minus_s) for reference
/// health h: expected discounted waiting gain at inner time s, given the
/// boundary level b_xi at the evaluation point and b_xi_minus_s at the
/// inner time. The tail weights are the lognormal probabilities of the dual
/// state sitting above the inner boundary level, Phi((log(b_xi /
/// b_xi_minus_s) + a_i) / (theta sqrt(s))): they tend to 1 as the inner
/// level drops to zero and to 1/2 as s tends to 0 with equal levels.
pub fn kernel_g(
    params: &ModelParams,
    xi: f64,
    s: f64,
    b_xi: f64,
    b_xi_minus_s: f64,
    h: f64,
) -> f64 {
    assert!(b_xi > 0.0, "kernel requires a positive outer boundary level");
    assert!(s >= 0.0 && xi >= s, "kernel requires 0 <= s <= xi");
    let t_inner = params.horizon - xi + s;
    let gamma = PostInvestCache::new(params, h * (-params.delta * s).exp()).gamma(t_inner);
    let fac = flow_factors(params, h, s);
    kernel_from_parts(params, &fac, s, b_xi, b_xi_minus_s, gamma)
}

pub(crate) fn kernel_from_parts(
    params: &ModelParams,
    fac: &FlowFactors,
    s: f64,
    b_xi: f64,
    b_xi_minus_s: f64,
    gamma: f64,
) -> f64 {
    let bq = b_xi.powf(params.q());
    if s == 0.0 {
        // Limiting convention: equal levels, vanishing variance, both tail
        // weights 1/2.
        return 0.5 * (b_xi * params.invest_amount - params.f_of_i() * gamma * bq);
    }
    let sig = params.theta() * s.sqrt();
    let lr = (b_xi / b_xi_minus_s).ln();
    let w1 = normal_cdf((lr + fac.a1) / sig);
    let w2 = normal_cdf((lr + fac.a2) / sig);
    fac.disc
        * (b_xi * fac.n2 * params.invest_amount * w1 - params.f_of_i() * gamma * fac.n1 * bq * w2)
}

/// Per-curve tables over the uniform xi-mesh: flow factors at every node
/// and Gamma tables at every decayed health h_ref e^{-delta m dxi}. Built
/// once per (params, h_ref, mesh), then every kernel evaluation is O(1).
pub struct PreInvestTables {
    params: ModelParams,
    pub h_ref: f64,
    pub dxi: f64,
    pub n: usize,
    theta: f64,
    facs: Vec<FlowFactors>,
    sqrt_s: Vec<f64>,
    /// gammas[m] tabulates t -> Gamma(t, h_ref e^{-delta m dxi}).
    gammas: Vec<GammaTable>,
    /// gamma_at[m][i] = Gamma(T - i dxi, h_ref e^{-delta m dxi}).
    gamma_at: Vec<Vec<f64>>,
}

impl PreInvestTables {
    pub fn new(params: &ModelParams, h_ref: f64, n: usize, cache_intervals: usize) -> Self {
        assert!(h_ref > 0.0 && n >= 2);
        let dxi = params.horizon / n as f64;
        let facs: Vec<FlowFactors> =
            (0..=n).map(|m| flow_factors(params, h_ref, m as f64 * dxi)).collect();
        let sqrt_s: Vec<f64> = (0..=n).map(|m| (m as f64 * dxi).sqrt()).collect();
        let gammas: Vec<GammaTable> = (0..=n)
            .into_par_iter()
            .map(|m| {
                let h_m = h_ref * (-params.delta * m as f64 * dxi).exp();
                PostInvestCache::with_resolution(params, h_m, cache_intervals).into_gamma_table()
            })
            .collect();
        let gamma_at: Vec<Vec<f64>> = gammas
            .iter()
            .map(|g| (0..=n).map(|i| g.gamma(params.horizon - i as f64 * dxi)).collect())
            .collect();
        PreInvestTables { params: *params, h_ref, dxi, n, theta: params.theta(), facs, sqrt_s, gammas, gamma_at }
    }

    /// Gamma(tau, h_ref e^{-delta s}) for arbitrary s in [0, T] and tau:
    /// cubic interpolation across the tabulated decay indices (adjacent
    /// tabulated healths differ by ~5e-4 relative, so the in-index error is
    /// far below every downstream tolerance).
    pub fn gamma_pre_decayed(&self, s: f64, tau: f64) -> f64 {
        let m = s / self.dxi;
        let n = self.n;
        if m <= 0.0 {
            return self.gammas[0].gamma(tau);
        }
        if m >= n as f64 {
            return self.gammas[n].gamma(tau);
        }
        if n < 4 {
            // Mesh too small for the cubic stencil; linear between neighbors.
            let i = (m.floor() as usize).min(n - 1);
            let fr = m - i as f64;
            return (1.0 - fr) * self.gammas[i].gamma(tau) + fr * self.gammas[i + 1].gamma(tau);
        }
        let i0 = (m.floor() as usize).clamp(1, n - 2) - 1;
        let fr = m - i0 as f64;
        // 4-point Lagrange on indices i0..i0+3.
        let mut acc = 0.0;
        for (j, w) in lagrange4(fr).iter().enumerate() {
            acc += w * self.gammas[i0 + j].gamma(tau);
        }
        acc
    }

    /// Upper bound for the dual boundary at mesh node k (time T - k dxi):
    /// (I/f(I))^{alpha-1} Gamma^{1-alpha} at the reference health.
    pub fn upper_bound_at(&self, k: usize) -> f64 {
        let ratio = self.params.invest_amount / self.params.f_of_i();
        ratio.powf(self.params.alpha - 1.0) * self.gamma_at[0][k].powf(1.0 - self.params.alpha)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Tabulated Gamma(T - i dxi, h_ref e^{-delta m dxi}).
    pub(crate) fn gamma_node(&self, m: usize, i: usize) -> f64 {
        self.gamma_at[m][i]
    }

    /// Trapezoidal stage sum for outer node k: the discretized integral
    /// with boundary level `b` at the outer node and `values[k - m]` at
    /// inner node m. `values` must cover indices 0..k (only 0..k-1 are
    /// read; the outer node uses `b`). The solved boundary value at node
    /// k is the root of this function in `b`; exposing it lets callers
    /// scan the stage equation directly.
    pub fn stage_sum(&self, k: usize, b: f64, values: &[f64]) -> f64 {
        let p = &self.params;
        let i_amt = p.invest_amount;
        let fi = p.f_of_i();
        let bq = b.powf(p.q());
        let lb = b.ln();
        // m = 0 endpoint (half weight): equal levels, weights 1/2.
        let mut acc = 0.5 * 0.5 * (b * i_amt - fi * self.gamma_at[0][k] * bq);
        for m in 1..=k {
            let fac = &self.facs[m];
            let gamma = self.gamma_at[m][k - m];
            let b_in = values[k - m];
            let sig = self.theta * self.sqrt_s[m];
            let (w1, w2) = if b_in > 0.0 {
                let lr = lb - b_in.ln();
                (normal_cdf((lr + fac.a1) / sig), normal_cdf((lr + fac.a2) / sig))
            } else {
                (1.0, 1.0)
            };
            let g = fac.disc * (b * fac.n2 * i_amt * w1 - fi * gamma * fac.n1 * bq * w2);
            acc += if m == k { 0.5 * g } else { g };
        }
        acc * self.dxi
    }
}

/// Barycentric-free 4-point Lagrange weights at fractional position
/// `x` in [1, 2] relative to nodes {0, 1, 2, 3}.
fn lagrange4(x: f64) -> [f64; 4] {
    let xm = [0.0, 1.0, 2.0, 3.0];
    let mut w = [0.0; 4];
    for i in 0..4 {
        let mut p = 1.0;
        for j in 0..4 {
            if i != j {
                p *= (x - xm[j]) / (xm[i] - xm[j]);
            }
        }
        w[i] = p;
    }
    w
}

/// Solved boundary curve for one reference health: nodes over
/// time-to-maturity, boundary values, and refined-mesh residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCurve {
    pub h_ref: f64,
    /// Strictly increasing time-to-maturity nodes, xi_grid[0] = 0.
    pub xi_grid: Vec<f64>,
    /// Dual boundary values b_bar(xi_j); values[0] = 0.
    pub values: Vec<f64>,
    /// Signed stage residuals re-evaluated on a refined mesh.
    pub residuals: Vec<f64>,
}

impl BoundaryCurve {
    /// Boundary value at arbitrary time-to-maturity by monotone cubic
    /// interpolation through the solved nodes.
    pub fn interpolant(&self) -> Pchip {
        Pchip::new(&self.xi_grid, &self.values).expect("solved curve grids are valid")
    }

    /// Boundary at calendar time t (clamped to the solved range).
    pub fn at_time(&self, t: f64, horizon: f64) -> f64 {
        let xi = (horizon - t).clamp(0.0, *self.xi_grid.last().unwrap());
        self.interpolant().eval(xi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverMeta {
    pub n_steps: usize,
    pub root_tol: f64,
    pub residual_refine: u32,
    pub wall_time_s: f64,
}

/// Boundary curves over a health grid, solved independently per health.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySurface {
    pub h_grid: Vec<f64>,
    pub curves: Vec<BoundaryCurve>,
    pub meta: SolverMeta,
}

impl BoundarySurface {
    /// Curve for an exact grid health, if present.
    pub fn curve_for(&self, h: f64) -> Option<&BoundaryCurve> {
        self.h_grid.iter().position(|&v| v == h).map(|i| &self.curves[i])
    }
}

/// Solves one curve on a uniform n-step mesh with the default quadrature
/// refinement. Stage k's root is bracketed in [1e-12, upper bound at node
/// k], extended upward once by a factor of 2 if the discrete stage
/// function has not changed sign at the proved bound.
pub fn solve_curve(params: &ModelParams, h: f64, n_steps: usize) -> Result<BoundaryCurve, BoundaryError> {
    solve_curve_refined(params, h, n_steps, DEFAULT_RESIDUAL_REFINE)
}

/// Solves one curve in two passes. A sequential pass roots each stage of
/// the node-mesh trapezoid system, which is exact for the Volterra
/// structure but carries the coarse quadrature error of the node spacing.
/// A polish pass then re-roots every node against the stage integrals on
/// a `refine`-times finer trapezoid mesh, interpolating the curve
/// monotonically between nodes, and sweeps until the node values are a
/// fixed point of that refined system. The stored residuals re-evaluate
/// the refined stage integrals at the final values and are at root-finder
/// noise level by construction; independent accuracy evidence comes from
/// mesh-convergence and Monte Carlo checks rather than from this metric.
pub fn solve_curve_refined(
    params: &ModelParams,
    h: f64,
    n_steps: usize,
    refine: u32,
) -> Result<BoundaryCurve, BoundaryError> {
    let tables = solve_tables(params, h, n_steps)?;
    let mut curve = solve_on_tables(&tables)?;
    let r = refine.max(1) as usize;
    let fine_tables = if r == 1 {
        tables
    } else {
        PreInvestTables::new(params, h, n_steps * r, KERNEL_CACHE_INTERVALS)
    };
    polish_on_fine(&fine_tables, r, &curve.xi_grid, &mut curve.values)?;
    curve.residuals = residuals_on(&fine_tables, r, &curve.xi_grid, &curve.values);
    Ok(curve)
}

fn solve_tables(params: &ModelParams, h: f64, n_steps: usize) -> Result<PreInvestTables, BoundaryError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(BoundaryError::Invalid(format!("h must be positive and finite, got {h}")));
    }
    if n_steps < 2 {
        return Err(BoundaryError::Invalid(format!("n_steps must be at least 2, got {n_steps}")));
    }
    Ok(PreInvestTables::new(params, h, n_steps, KERNEL_CACHE_INTERVALS))
}

fn solve_on_tables(tables: &PreInvestTables) -> Result<BoundaryCurve, BoundaryError> {
    let n = tables.n;
    let dxi = tables.dxi;
    let mut values = vec![0.0; n + 1];
    for k in 1..=n {
        let f = |b: f64| tables.stage_sum(k, b, &values);
        let bound = tables.upper_bound_at(k);
        let mut hi = bound.max(BRACKET_FLOOR * 4.0);
        let f_lo = f(BRACKET_FLOOR);
        let mut f_hi = f(hi);
        if f_lo.signum() == f_hi.signum() && f_lo != 0.0 && f_hi != 0.0 {
            // Discretization can push the stage root slightly above the
            // continuous-problem bound at coarse meshes; allow one doubling.
            hi *= 2.0;
            f_hi = f(hi);
            if f_lo.signum() == f_hi.signum() && f_hi != 0.0 {
                return Err(BoundaryError::Stage { k, xi: k as f64 * dxi, lo: BRACKET_FLOOR, hi, f_lo, f_hi });
            }
        }
        let spec = BracketSpec::new(BRACKET_FLOOR, hi);
        values[k] = find_root(f, &spec, RootMethod::Bisection).map_err(|e| match e {
            NumError::NoSignChange { lo, hi, f_lo, f_hi } => {
                BoundaryError::Stage { k, xi: k as f64 * dxi, lo, hi, f_lo, f_hi }
            }
            other => BoundaryError::Invalid(format!("stage {k} root-find failed: {other}")),
        })?;
    }
    let xi_grid = (0..=n).map(|j| j as f64 * dxi).collect();
    Ok(BoundaryCurve { h_ref: tables.h_ref, xi_grid, values, residuals: vec![0.0; n + 1] })
}

/// Fine-mesh boundary values: exact at solved nodes, monotone cubic
/// interpolation between.
pub(crate) fn refined_values(r: usize, xi_grid: &[f64], values: &[f64], dxi_fine: f64) -> Vec<f64> {
    let n = values.len() - 1;
    if r == 1 {
        return values.to_vec();
    }
    let interp = Pchip::new(xi_grid, values).expect("solved curve grids are valid");
    (0..=n * r)
        .map(|j| {
            if j % r == 0 {
                values[j / r]
            } else {
                interp.eval(j as f64 * dxi_fine).max(0.0)
            }
        })
        .collect()
}

fn residuals_on(tables: &PreInvestTables, r: usize, xi_grid: &[f64], values: &[f64]) -> Vec<f64> {
    let n = values.len() - 1;
    let fine = refined_values(r, xi_grid, values, tables.dxi);
    let mut residuals = vec![0.0; n + 1];
    for k in 1..=n {
        residuals[k] = tables.stage_sum(k * r, fine[k * r], &fine);
    }
    residuals
}

/// Sweeps the node values to a fixed point of the refined-quadrature stage
/// system: each sweep rebuilds the between-node interpolation from the
/// current values, then re-roots every node in order against the stage
/// integral on the fine mesh (updated node values feed later stages within
/// the same sweep).
///
/// The integrand near s = 0 compares the trial level against the curve
/// just inside the stage through Phi(ln(b / b_in) / (theta sqrt(s))),
/// which is razor sharp at fine spacings. The interpolated points of the
/// last two segments therefore must track the trial value rather than
/// stay frozen at the previous iterate, or the node map loses its
/// contraction. A local monotone-cubic window around the stage node
/// reproduces the full interpolant's slopes exactly on those segments, so
/// the converged values are a true fixed point of the same refined
/// evaluation used for the stored residuals.
fn polish_on_fine(
    tables: &PreInvestTables,
    r: usize,
    xi_grid: &[f64],
    values: &mut [f64],
) -> Result<(), BoundaryError> {
    if r == 1 {
        // The node-mesh system is lower triangular, so the sequential
        // pass already zeroed every stage exactly.
        return Ok(());
    }
    let n = values.len() - 1;
    const MAX_SWEEPS: usize = 24;
    for _ in 0..MAX_SWEEPS {
        let scratch = RefCell::new(refined_values(r, xi_grid, values, tables.dxi));
        let mut max_rel = 0.0_f64;
        for k in 1..=n {
            // Window of nodes whose interior slopes govern the last two
            // interpolation segments of stage k.
            let lo_w = k.saturating_sub(3);
            let hi_w = (k + 1).min(n);
            let xs = &xi_grid[lo_w..=hi_w];
            let base_ys: Vec<f64> = values[lo_w..=hi_w].to_vec();
            let j_start = k.saturating_sub(2) * r + 1;
            let reinterp = |buf: &mut [f64], b: f64| {
                let mut ys = base_ys.clone();
                ys[k - lo_w] = b;
                let loc = Pchip::new(xs, &ys).expect("window nodes are valid");
                for j in j_start..k * r {
                    if j % r != 0 {
                        buf[j] = loc.eval(j as f64 * tables.dxi).max(0.0);
                    }
                }
            };
            let f = |b: f64| {
                let mut buf = scratch.borrow_mut();
                reinterp(&mut buf, b);
                tables.stage_sum(k * r, b, &buf)
            };
            let prev = values[k];
            let (mut lo, mut hi) = (0.8 * prev, 1.25 * prev);
            if !(lo > 0.0) || f(lo).signum() == f(hi).signum() {
                lo = BRACKET_FLOOR;
                hi = (2.0 * tables.upper_bound_at(k * r)).max(hi);
            }
            let spec = BracketSpec::new(lo, hi);
            let root = find_root(f, &spec, RootMethod::Brent).map_err(|e| match e {
                NumError::NoSignChange { lo, hi, f_lo, f_hi } => {
                    BoundaryError::Stage { k, xi: xi_grid[k], lo, hi, f_lo, f_hi }
                }
                other => BoundaryError::Invalid(format!("polish of stage {k} failed: {other}")),
            })?;
            values[k] = root;
            let mut buf = scratch.borrow_mut();
            reinterp(&mut buf, root);
            buf[k * r] = root;
            max_rel = max_rel.max((root - prev).abs() / (1.0 + prev.abs()));
        }
        if max_rel < 1e-13 {
            break;
        }
    }
    Ok(())
}

/// Re-evaluates every stage integral on a `refine`-times finer trapezoid
/// mesh, interpolating the solved curve between nodes, and returns the
/// signed residuals (index 0 is the terminal node, residual 0 by
/// convention).
pub fn residuals_refined(params: &ModelParams, curve: &BoundaryCurve, refine: u32) -> Vec<f64> {
    let n = curve.values.len() - 1;
    let r = refine.max(1) as usize;
    let tables = PreInvestTables::new(params, curve.h_ref, n * r, KERNEL_CACHE_INTERVALS);
    residuals_on(&tables, r, &curve.xi_grid, &curve.values)
}

/// Residual of one stage at a chosen refinement; convenience wrapper over
/// the all-node computation.
pub fn residual(params: &ModelParams, curve: &BoundaryCurve, k: usize, refine: u32) -> f64 {
    assert!(k >= 1 && k < curve.values.len(), "node index out of range");
    residuals_refined(params, curve, refine)[k]
}

/// Solves one curve per health in parallel with the default quadrature
/// refinement. Health nodes must be positive and strictly increasing.
pub fn solve_surface(
    params: &ModelParams,
    h_grid: &[f64],
    n_steps: usize,
) -> Result<BoundarySurface, BoundaryError> {
    solve_surface_refined(params, h_grid, n_steps, DEFAULT_RESIDUAL_REFINE)
}

/// Solves one curve per health in parallel at a chosen quadrature
/// refinement. Health nodes must be positive and strictly increasing.
pub fn solve_surface_refined(
    params: &ModelParams,
    h_grid: &[f64],
    n_steps: usize,
    refine: u32,
) -> Result<BoundarySurface, BoundaryError> {
    if h_grid.is_empty() {
        return Err(BoundaryError::Invalid("h_grid must be nonempty".into()));
    }
    if h_grid.windows(2).any(|w| !(w[0] < w[1])) || !(h_grid[0] > 0.0) {
        return Err(BoundaryError::Invalid("h_grid must be positive and strictly increasing".into()));
    }
    let start = Instant::now();
    let curves: Vec<BoundaryCurve> = h_grid
        .par_iter()
        .map(|&h| {
            solve_curve_refined(params, h, n_steps, refine)
                .map_err(|e| BoundaryError::AtHealth { h, source: Box::new(e) })
        })
        .collect::<Result<_, _>>()?;
    Ok(BoundarySurface {
        h_grid: h_grid.to_vec(),
        curves,
        meta: SolverMeta {
            n_steps,
            root_tol: BracketSpec::new(0.0, 1.0).tol,
            residual_refine: refine,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    })
}

/// Writes a surface as CSV rows (h, t, xi, b_dual, residual), h-major and
/// xi-minor, after any '#'-prefixed manifest lines the caller already wrote.
pub fn write_surface_csv<W: Write>(surface: &BoundarySurface, horizon: f64, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["h", "t", "xi", "b_dual", "residual"]).map_err(into_io)?;
    for (h, curve) in surface.h_grid.iter().zip(surface.curves.iter()) {
        for j in 0..curve.xi_grid.len() {
            let xi = curve.xi_grid[j];
            w.write_record(&[
                format!("{h}"),
                format!("{}", horizon - xi),
                format!("{xi}"),
                format!("{}", curve.values[j]),
                format!("{:e}", curve.residuals[j]),
            ])
            .map_err(into_io)?;
        }
    }
    w.flush()
}

fn into_io(e: csv::Error) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::Other, e)
}
