//! Dual-to-primal transform: the multiplier z*(t, x, h) solving
//! J_z = -x, the primal value V = J(t, z*, h) + x z*, the primal
//! investment boundary b_hat(t, h) = -W_z(t, b(t,h), h) + g(t), and the
//! feedback consumption and portfolio maps
//!
//!   c* = h (z*/alpha)^{1/(alpha-1)},  pi* = (theta/sigma) z* J_zz.
//!
//! J is convex in z with J_z spanning (-inf, 0), so the defining
//! equation has a unique root for every positive wealth and z* is
//! strictly decreasing in x. Wealth at or above b_hat is the investment
//! region; it corresponds exactly to z* at or below the dual boundary.

use std::fmt;
use std::io::Write;

use crate::boundary::BoundarySurface;
use crate::num::{find_root, minimize_scalar, BracketSpec, NumError, RootMethod};
use crate::params::{g_value, ModelParams};
use crate::value::{PointEvaluator, ValueError};

/// Errors from the primal transform.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyError {
    /// The boundary surface has no curve at the requested health.
    Coverage { h: f64 },
    /// The primal transform needs strictly positive time to maturity.
    Horizon { t: f64 },
    /// The multiplier bracket never straddled the root; carries the
    /// defining-equation values J_z + x at the bracket ends.
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    /// Post-investment wealth must exceed the annuity floor g(t).
    Infeasible { x: f64, floor: f64 },
    Value(ValueError),
    Num(NumError),
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::Coverage { h } => {
                write!(f, "boundary surface has no curve at health {h}")
            }
            PolicyError::Horizon { t } => {
                write!(f, "primal transform is undefined at or past the horizon, got t = {t}")
            }
            PolicyError::Bracket { lo, hi, f_lo, f_hi } => write!(
                f,
                "multiplier bracket [{lo:e}, {hi:e}] does not straddle the root: \
                 J_z + x = {f_lo:e} and {f_hi:e} at the ends"
            ),
            PolicyError::Infeasible { x, floor } => {
                write!(f, "wealth {x} does not exceed the annuity floor {floor}")
            }
            PolicyError::Value(e) => write!(f, "{e}"),
            PolicyError::Num(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PolicyError {}

impl From<ValueError> for PolicyError {
    fn from(e: ValueError) -> Self {
        PolicyError::Value(e)
    }
}

/// Feedback policy at one primal point.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    /// Dual multiplier z*(t, x, h), the marginal value of wealth.
    pub z_star: f64,
    /// Primal value V(t, x, h).
    pub v: f64,
    /// Consumption rate.
    pub c_star: f64,
    /// Wealth held in the risky asset.
    pub pi_star: f64,
    /// Whether the point lies in the investment region x >= b_hat(t, h).
    pub invest_now: bool,
}

/// Inverse marginal utility of consumption: the c solving
/// u_c(c, h) = z for u(c, h) = c^alpha h^{1-alpha}.
pub fn inverse_marginal_utility(params: &ModelParams, z: f64, h: f64) -> f64 {
    h * (z / params.alpha).powf(1.0 / (params.alpha - 1.0))
}

/// Primal transform for one reference health, wrapping the dual value
/// evaluator at that health.
pub struct PolicyEvaluator {
    point: PointEvaluator,
}

impl PolicyEvaluator {
    /// Selects the surface curve solved exactly at health h; the
    /// evaluator is built at the surface's own quadrature refinement.
    pub fn new(params: &ModelParams, surface: &BoundarySurface, h: f64) -> Result<Self, PolicyError> {
        let curve = surface.curve_for(h).ok_or(PolicyError::Coverage { h })?;
        let point = PointEvaluator::with_refine(params, curve, surface.meta.residual_refine)?;
        Ok(PolicyEvaluator { point })
    }

    pub fn from_point(point: PointEvaluator) -> Self {
        PolicyEvaluator { point }
    }

    pub fn point(&self) -> &PointEvaluator {
        &self.point
    }

    pub fn h(&self) -> f64 {
        self.point.h()
    }

    /// The multiplier z*(t, x): unique root of J_z(t, z) + x = 0.
    /// Bracketed in [b(t) 1e-3, (dual upper bound) 1e3] and expanded
    /// geometrically up to three times on a one-sided bracket.
    pub fn z_star(&self, t: f64, x: f64) -> Result<f64, PolicyError> {
        let p = self.point.params();
        if !(t < p.horizon) {
            return Err(PolicyError::Horizon { t });
        }
        assert!(x > 0.0 && x.is_finite(), "wealth must be positive, got {x}");
        let f = |z: f64| self.point.j_z(t, z) + x;
        let bound = crate::dual::boundary_upper_bound(p, t, self.point.h())
            .expect("t within horizon and h positive");
        let mut lo = (1e-3 * self.point.boundary_at(t)).max(1e-10);
        let mut hi = (1e3 * bound).max(lo * 10.0);
        let (mut f_lo, mut f_hi) = (f(lo), f(hi));
        for _ in 0..3 {
            if f_lo > 0.0 {
                lo *= 1e-3;
                f_lo = f(lo);
            }
            if f_hi < 0.0 {
                hi *= 1e3;
                f_hi = f(hi);
            }
            if f_lo <= 0.0 && f_hi >= 0.0 {
                break;
            }
        }
        if !(f_lo <= 0.0 && f_hi >= 0.0) {
            return Err(PolicyError::Bracket { lo, hi, f_lo, f_hi });
        }
        find_root(f, &BracketSpec::new(lo, hi), RootMethod::Brent).map_err(PolicyError::Num)
    }

    /// Primal investment boundary b_hat(t) = -W_z(t, b(t), h) + g(t):
    /// the wealth level whose marginal dual value sits exactly on the
    /// dual boundary.
    pub fn primal_boundary(&self, t: f64) -> Result<f64, PolicyError> {
        let p = self.point.params();
        if !(t < p.horizon) {
            return Err(PolicyError::Horizon { t });
        }
        let b = self.point.boundary_at(t);
        let g = g_value(p, t).expect("t within horizon");
        Ok(-self.point.post().w_z(t, b) + g)
    }

    /// Full feedback evaluation: multiplier, primal value, consumption,
    /// risky allocation, and region membership.
    pub fn policy(&self, t: f64, x: f64) -> Result<PolicyEval, PolicyError> {
        let p = *self.point.params();
        let zs = self.z_star(t, x)?;
        let v = self.point.j(t, zs) + x * zs;
        let c_star = inverse_marginal_utility(&p, zs, self.h());
        let pi_star = (p.theta() / p.sigma) * zs * self.point.j_zz(t, zs);
        let invest_now = x >= self.primal_boundary(t)?;
        Ok(PolicyEval { z_star: zs, v, c_star, pi_star, invest_now })
    }
}

/// Value after the investment is already made: the convex dual
/// minimization inf_{z>0} [W(t, z, h) + z (x - g(t))], taken over a wide
/// logarithmic bracket. Requires wealth above the annuity floor g(t).
pub fn post_investment_value(
    params: &ModelParams,
    t: f64,
    x: f64,
    h: f64,
) -> Result<f64, PolicyError> {
    let floor = g_value(params, t).map_err(|_| PolicyError::Horizon { t })?;
    if !(x > floor) {
        return Err(PolicyError::Infeasible { x, floor });
    }
    let cache = crate::dual::PostInvestCache::new(params, h);
    let objective = |u: f64| {
        let z = u.exp();
        cache.w(t, z) + z * (x - floor)
    };
    let (_, value) = minimize_scalar(objective, (1e-8f64).ln(), (1e8f64).ln(), 1e-12)
        .map_err(PolicyError::Num)?;
    Ok(value)
}

/// Policy lattice over (h, t, x), h-major, x-minor, with the primal
/// boundary recorded per (h, t).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrid {
    pub h_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub x_grid: Vec<f64>,
    pub evals: Vec<PolicyEval>,
    /// b_hat(t, h), h-major.
    pub b_hat: Vec<f64>,
}

impl PolicyGrid {
    pub fn index(&self, ih: usize, it: usize, ix: usize) -> usize {
        (ih * self.t_grid.len() + it) * self.x_grid.len() + ix
    }
}

/// Evaluates the feedback policy over a (t, x) lattice for every curve
/// of the surface. Every t node must lie strictly before the horizon.
pub fn solve_policy_grid(
    params: &ModelParams,
    surface: &BoundarySurface,
    t_grid: &[f64],
    x_grid: &[f64],
) -> Result<PolicyGrid, PolicyError> {
    if t_grid.is_empty() || x_grid.is_empty() {
        return Err(PolicyError::Value(ValueError::BadGrid(
            "t and x grids must be nonempty".into(),
        )));
    }
    if let Some(&t) = t_grid.iter().find(|&&t| !(0.0 <= t && t < params.horizon)) {
        return Err(PolicyError::Horizon { t });
    }
    if x_grid.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(PolicyError::Value(ValueError::BadGrid(
            "x nodes must be positive and finite".into(),
        )));
    }
    let mut evals = Vec::with_capacity(surface.h_grid.len() * t_grid.len() * x_grid.len());
    let mut b_hat = Vec::with_capacity(surface.h_grid.len() * t_grid.len());
    for &h in &surface.h_grid {
        let eval = PolicyEvaluator::new(params, surface, h)?;
        for &t in t_grid {
            b_hat.push(eval.primal_boundary(t)?);
            for &x in x_grid {
                evals.push(eval.policy(t, x)?);
            }
        }
    }
    Ok(PolicyGrid {
        h_grid: surface.h_grid.clone(),
        t_grid: t_grid.to_vec(),
        x_grid: x_grid.to_vec(),
        evals,
        b_hat,
    })
}

/// Writes a policy lattice as CSV rows
/// (t, x, h, z_star, v, c_star, pi_star, invest_now, b_hat), h-major and
/// x-minor, after any '#' manifest lines the caller wrote.
pub fn write_policy_csv<W: Write>(grid: &PolicyGrid, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "x", "h", "z_star", "v", "c_star", "pi_star", "invest_now", "b_hat"])
        .map_err(csv_io)?;
    for (ih, h) in grid.h_grid.iter().enumerate() {
        for (it, t) in grid.t_grid.iter().enumerate() {
            let bh = grid.b_hat[ih * grid.t_grid.len() + it];
            for (ix, x) in grid.x_grid.iter().enumerate() {
                let e = &grid.evals[grid.index(ih, it, ix)];
                w.write_record(&[
                    format!("{t}"),
                    format!("{x}"),
                    format!("{h}"),
                    format!("{}", e.z_star),
                    format!("{}", e.v),
                    format!("{}", e.c_star),
                    format!("{}", e.pi_star),
                    format!("{}", e.invest_now),
                    format!("{bh}"),
                ])
                .map_err(csv_io)?;
            }
        }
    }
    w.flush()
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::Other, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::solve_curve;
    use crate::dual::{u_hat, u_of_c};

    fn small_policy() -> PolicyEvaluator {
        let p = ModelParams::default();
        let curve = solve_curve(&p, 1000.0, 40).unwrap();
        PolicyEvaluator::from_point(PointEvaluator::new(&p, &curve).unwrap())
    }

    #[test]
    fn multiplier_round_trip_and_monotonicity() {
        let eval = small_policy();
        let mut prev = f64::INFINITY;
        for x in [35.0, 60.0, 90.0, 140.0] {
            let zs = eval.z_star(0.0, x).unwrap();
            let resid = eval.point().j_z(0.0, zs) + x;
            assert!(resid.abs() <= 1e-6 * (1.0 + x), "x = {x}: residual {resid}");
            assert!(zs < prev, "z_star must decrease in wealth");
            prev = zs;
        }
    }

    #[test]
    fn primal_boundary_sits_above_the_annuity_floor() {
        let eval = small_policy();
        for t in [0.0, 5.0, 12.0, 19.0] {
            let bh = eval.primal_boundary(t).unwrap();
            let g = g_value(eval.point().params(), t).unwrap();
            assert!(bh > g, "t = {t}: b_hat {bh} <= floor {g}");
        }
    }

    #[test]
    fn consumption_identity_holds_at_the_multiplier() {
        let eval = small_policy();
        let p = *eval.point().params();
        let h = eval.h();
        for x in [40.0, 75.0, 120.0] {
            let pe = eval.policy(3.0, x).unwrap();
            let lhs = u_of_c(&p, pe.c_star, h) - pe.z_star * pe.c_star;
            let rhs = u_hat(&p, pe.z_star, h);
            assert!(
                ((lhs - rhs) / rhs).abs() < 1e-10,
                "x = {x}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn investment_region_matches_the_dual_region() {
        let eval = small_policy();
        let t = 2.0;
        let b_dual = eval.point().boundary_at(t);
        let bh = eval.primal_boundary(t).unwrap();
        for x in [0.5 * bh, 0.9 * bh, 1.1 * bh, 2.0 * bh] {
            let pe = eval.policy(t, x).unwrap();
            assert_eq!(pe.invest_now, x >= bh);
            assert_eq!(pe.invest_now, pe.z_star <= b_dual * (1.0 + 1e-8), "x = {x}");
        }
    }

    #[test]
    fn value_matches_dense_grid_duality_scan() {
        let eval = small_policy();
        let (t, x) = (0.0, 50.0);
        let v = eval.policy(t, x).unwrap().v;
        let scan = (1..=40_000)
            .map(|i| i as f64 * 2.5e-4 * 12.0)
            .map(|z| eval.point().j(t, z) + x * z)
            .fold(f64::INFINITY, f64::min);
        assert!((v - scan).abs() < 1e-5 * scan.abs(), "{v} vs {scan}");
        assert!(v <= scan + 1e-9 * scan.abs());
    }

    #[test]
    fn post_investment_value_checks_the_first_order_condition() {
        let p = ModelParams::default();
        let (t, x, h) = (0.0, 60.0, 1000.0);
        let v = post_investment_value(&p, t, x, h).unwrap();
        let cache = crate::dual::PostInvestCache::new(&p, h);
        let floor = g_value(&p, t).unwrap();
        // Interior argmin from the closed form W_z(t, z) = -(x - g_t).
        let k = cache.k_factor(t);
        let z_hat = ((x - floor) / (p.alpha.powf(1.0 / (1.0 - p.alpha)) * k))
            .powf(p.alpha - 1.0);
        let foc = cache.w_z(t, z_hat) + (x - floor);
        assert!(foc.abs() < 1e-9 * (1.0 + x), "FOC residual {foc}");
        let direct = cache.w(t, z_hat) + z_hat * (x - floor);
        assert!(((v - direct) / direct).abs() < 1e-9, "{v} vs {direct}");
        assert!(matches!(
            post_investment_value(&p, t, floor * 0.5, h),
            Err(PolicyError::Infeasible { .. })
        ));
    }

    #[test]
    fn primal_value_is_concave_with_marginal_value_z_star() {
        let eval = small_policy();
        let t = 4.0;
        let dx = 0.5;
        let xs: Vec<f64> = (0..30).map(|i| 35.0 + i as f64 * dx).collect();
        let vs: Vec<f64> = xs.iter().map(|&x| eval.policy(t, x).unwrap().v).collect();
        for i in 1..xs.len() - 1 {
            let second = vs[i + 1] - 2.0 * vs[i] + vs[i - 1];
            assert!(second <= 1e-6 * vs[i].abs(), "x = {}: {second}", xs[i]);
            let slope = (vs[i + 1] - vs[i - 1]) / (2.0 * dx);
            let zs = eval.z_star(t, xs[i]).unwrap();
            assert!(
                ((slope - zs) / zs).abs() < 1e-3,
                "x = {}: slope {slope} vs z* {zs}",
                xs[i]
            );
        }
    }

    #[test]
    fn no_risky_position_without_a_risk_premium() {
        let mut p = ModelParams::default();
        p.mu = p.r;
        let curve = solve_curve(&p, 1000.0, 16).unwrap();
        let eval = PolicyEvaluator::from_point(PointEvaluator::new(&p, &curve).unwrap());
        let pe = eval.policy(1.0, 80.0).unwrap();
        assert_eq!(pe.pi_star, 0.0);
        assert!(pe.c_star > 0.0);
    }

    #[test]
    fn policy_grid_rows_and_csv_shape() {
        let p = ModelParams::default();
        let surface = crate::boundary::solve_surface(&p, &[1000.0], 20).unwrap();
        let grid =
            solve_policy_grid(&p, &surface, &[0.0, 10.0], &[40.0, 80.0, 120.0]).unwrap();
        assert_eq!(grid.evals.len(), 6);
        assert_eq!(grid.b_hat.len(), 2);
        let mut out = Vec::new();
        write_policy_csv(&grid, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("t,x,h,z_star,v,c_star,pi_star,invest_now,b_hat\n"));
        assert_eq!(text.lines().count(), 7);
        assert!(text.contains("false") || text.contains("true"));
    }
}
