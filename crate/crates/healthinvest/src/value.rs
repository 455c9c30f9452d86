//! Dual value functions built on a solved investment boundary.
//!
//! The dual problem splits into a smooth part and a stopped part. The
//! smooth part W - z g(t) is closed form (see `dual`); the stopped part
//! j_hat(t, z, h) is the expected discounted gain of waiting, collected
//! while the dual state stays above the boundary:
//!
//!   j_hat(t, z, h) = E[ int_0^{tau} e^{-(rho s + int M1)}
//!                         (I Z_s - f(I) Gamma(t+s, H1_s) Z_s^q) ds ],
//!
//! where tau is the first time Z falls to the boundary (or the horizon).
//! Strictly below the boundary tau is zero and j_hat is an exact zero.
//! On and above it, `PointEvaluator` computes j_hat by the same
//! tail-weight trapezoid quadrature the boundary solver uses, on the
//! solver's refined mesh, so that j_hat vanishes at the solved boundary
//! up to the stored residuals.
//! The full dual value and its z-derivatives follow by adding the closed
//! forms; a Monte Carlo sampler of the same stopped functional serves as
//! an independent oracle and prices deliberately shifted stopping rules.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::boundary::{
    flow_factors, kernel_from_parts, refined_values, BoundaryCurve, BoundarySurface,
    PreInvestTables, DEFAULT_RESIDUAL_REFINE, KERNEL_CACHE_INTERVALS,
};
use crate::dual::PostInvestCache;
use crate::health::integrated_mortality_pre;
use crate::num::{normal_cdf, Pchip};
use crate::params::{g_value, ModelParams};

/// Errors from assembling value surfaces on top of a solved boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueError {
    /// The curve's last time-to-maturity node does not match the model
    /// horizon it is being evaluated under.
    HorizonMismatch { curve: f64, model: f64 },
    /// A query lattice is empty, unsorted, or out of the model's domain.
    BadGrid(String),
}

impl fmt::Display for ValueError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueError::HorizonMismatch { curve, model } => write!(
                f,
                "boundary curve spans time-to-maturity {curve} but the model horizon is {model}"
            ),
            ValueError::BadGrid(msg) => write!(f, "bad value lattice: {msg}"),
        }
    }
}

impl std::error::Error for ValueError {}

/// Point queries of the dual value for one reference health.
///
/// Holds the boundary refined to the solver's quadrature mesh, the flow
/// factor and Gamma tables on that mesh, and the closed-form cache for
/// the smooth part, so each query costs one pass over the mesh.
pub struct PointEvaluator {
    params: ModelParams,
    tables: PreInvestTables,
    /// Boundary values on the refined mesh, b_bar(j dxi).
    fine: Vec<f64>,
    interp: Pchip,
    post: PostInvestCache,
}

impl PointEvaluator {
    pub fn new(params: &ModelParams, curve: &BoundaryCurve) -> Result<Self, ValueError> {
        Self::with_refine(params, curve, DEFAULT_RESIDUAL_REFINE)
    }

    /// Builds the evaluator on a mesh `refine` times finer than the
    /// curve's nodes. Matching the refinement the curve was solved with
    /// makes the stopped value vanish at the boundary to the accuracy of
    /// the stored residuals.
    pub fn with_refine(
        params: &ModelParams,
        curve: &BoundaryCurve,
        refine: u32,
    ) -> Result<Self, ValueError> {
        let last = *curve.xi_grid.last().expect("solved curves are nonempty");
        if (last - params.horizon).abs() > 1e-9 * params.horizon {
            return Err(ValueError::HorizonMismatch { curve: last, model: params.horizon });
        }
        let r = refine.max(1) as usize;
        let n_fine = (curve.xi_grid.len() - 1) * r;
        let tables = PreInvestTables::new(params, curve.h_ref, n_fine, KERNEL_CACHE_INTERVALS);
        let fine = refined_values(r, &curve.xi_grid, &curve.values, tables.dxi);
        let fine_xi: Vec<f64> = (0..=n_fine).map(|j| j as f64 * tables.dxi).collect();
        let interp = Pchip::new(&fine_xi, &fine).expect("refined mesh is strictly increasing");
        let post = PostInvestCache::new(params, curve.h_ref);
        Ok(PointEvaluator { params: *params, tables, fine, interp, post })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Reference health the boundary was solved at.
    pub fn h(&self) -> f64 {
        self.tables.h_ref
    }

    /// Closed-form cache for the smooth part at this health.
    pub fn post(&self) -> &PostInvestCache {
        &self.post
    }

    /// Dual boundary at calendar time t.
    pub fn boundary_at(&self, t: f64) -> f64 {
        let xi = self.params.horizon - t;
        if xi <= 0.0 {
            0.0
        } else {
            self.interp.eval(xi.min(self.params.horizon)).max(0.0)
        }
    }

    /// Stopped dual value j_hat(t, z). Strictly below the boundary the
    /// stopping time is zero and the value is returned as an exact zero;
    /// on and above the boundary the representation is integrated by the
    /// solver's trapezoid quadrature with a smooth first-cell weight, so
    /// on the boundary itself the result reproduces the stored stage
    /// residuals.
    pub fn j_hat(&self, t: f64, z: f64) -> f64 {
        assert!((0.0..=self.params.horizon).contains(&t), "t = {t} outside [0, T]");
        assert!(z > 0.0 && z.is_finite(), "dual state must be positive, got {z}");
        let xi = self.params.horizon - t;
        if xi <= 0.0 {
            return 0.0;
        }
        let pos = xi / self.tables.dxi;
        let near = pos.round();
        if (pos - near).abs() < 1e-9 && near >= 1.0 {
            let k = near as usize;
            if z < self.fine[k] {
                return 0.0;
            }
            self.j_hat_aligned(k, z)
        } else {
            if z < self.interp.eval(xi).max(0.0) {
                return 0.0;
            }
            self.j_hat_offset(xi, z)
        }
    }

    /// Expected fraction of the first quadrature cell that the dual
    /// state spends above the boundary, with the boundary and flow
    /// frozen at their cell-start levels: S(u) with
    /// u = ln(z/b) / (theta sqrt(s1)), where
    /// S(u) = Phi(u) + u^2 (Phi(u) - 1) + u phi(u)
    /// is the exact cell average of s -> Phi(u sqrt(s1/s)). S rises
    /// smoothly from 0 (deep below) through 1/2 (on the boundary, the
    /// solver's equal-level convention) to 1 (well above); a hard
    /// indicator here would make j_hat jump by a quarter cell of flow
    /// across the boundary.
    fn first_cell_fraction(&self, z: f64, b: f64, s1: f64) -> f64 {
        let spread = self.params.theta().abs() * s1.sqrt();
        if b <= 0.0 {
            return 1.0;
        }
        if spread == 0.0 {
            return if z > b {
                1.0
            } else if z == b {
                0.5
            } else {
                0.0
            };
        }
        let u = (z / b).ln() / spread;
        let phi = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = normal_cdf(u);
        (cdf + u * u * (cdf - 1.0) + u * phi).clamp(0.0, 1.0)
    }

    /// Node value of the elapsed-time-zero integrand that makes the
    /// first trapezoid cell integrate to flow0 s1 S(u): pairing
    /// g0 = flow0 (2 S - Phi) with the kernel's ~ flow0 Phi value at the
    /// far end of the cell averages to the smooth cell fraction.
    fn entry_node(&self, z: f64, b: f64, s1: f64, flow0: f64) -> f64 {
        let s = self.first_cell_fraction(z, b, s1);
        let u = if b > 0.0 && self.params.theta() != 0.0 {
            (z / b).ln() / (self.params.theta().abs() * s1.sqrt())
        } else if z >= b {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        flow0 * (2.0 * s - normal_cdf(u))
    }

    /// Query at a refined mesh node: the solver's stage sum with the
    /// outer boundary level replaced by z, with the s = 0 endpoint
    /// reweighted from the equal-level convention to the smooth
    /// first-cell fraction.
    fn j_hat_aligned(&self, k: usize, z: f64) -> f64 {
        let p = &self.params;
        let dxf = self.tables.dxi;
        let base = self.tables.stage_sum(k, z, &self.fine);
        let flow0 =
            z * p.invest_amount - p.f_of_i() * self.tables.gamma_node(0, k) * z.powf(p.q());
        let g0 = self.entry_node(z, self.fine[k], dxf, flow0);
        base + (g0 - 0.5 * flow0) * 0.5 * dxf
    }

    /// Query between mesh nodes: trapezoid over s in {0, xi - k dxi, ...,
    /// xi}, so every inner node still sits on the tabulated mesh and only
    /// the first cell is shorter.
    fn j_hat_offset(&self, xi: f64, z: f64) -> f64 {
        let p = &self.params;
        let dxf = self.tables.dxi;
        let k = ((xi / dxf - 1e-9).floor().max(0.0) as usize).min(self.tables.n);
        let b_here = self.interp.eval(xi).max(0.0);
        let gamma0 = self.tables.gamma_pre_decayed(0.0, p.horizon - xi);
        let flow0 = z * p.invest_amount - p.f_of_i() * gamma0 * z.powf(p.q());
        let s1 = (xi - k as f64 * dxf).max(f64::MIN_POSITIVE);
        let mut prev_s = 0.0;
        let mut prev_g = self.entry_node(z, b_here, s1, flow0);
        let mut acc = 0.0;
        for j in (0..=k).rev() {
            let s = xi - j as f64 * dxf;
            if s <= 0.0 {
                continue;
            }
            let fac = flow_factors(p, self.tables.h_ref, s);
            let gamma = self.tables.gamma_pre_decayed(s, p.horizon - j as f64 * dxf);
            let g = kernel_from_parts(p, &fac, s, z, self.fine[j], gamma);
            acc += 0.5 * (prev_g + g) * (s - prev_s);
            prev_s = s;
            prev_g = g;
        }
        acc
    }

    /// Full dual value j = j_hat + W - z g(t).
    pub fn j(&self, t: f64, z: f64) -> f64 {
        let g = g_value(&self.params, t).expect("t within horizon");
        self.j_hat(t, z) + self.post.w(t, z) - z * g
    }

    /// dj_hat/dz: identically zero in the stopping region; elsewhere a
    /// centered difference with step max(1e-4, 1e-4 z), switching to a
    /// one-sided second-order stencil when the step would straddle the
    /// boundary.
    pub fn j_hat_z(&self, t: f64, z: f64) -> f64 {
        let b = self.boundary_at(t);
        let dz = 1e-4_f64.max(1e-4 * z);
        if z <= b {
            0.0
        } else if z - dz <= b {
            (-3.0 * self.j_hat(t, z) + 4.0 * self.j_hat(t, z + dz) - self.j_hat(t, z + 2.0 * dz))
                / (2.0 * dz)
        } else {
            (self.j_hat(t, z + dz) - self.j_hat(t, z - dz)) / (2.0 * dz)
        }
    }

    /// d2 j_hat/dz2 with the same stencil-switching rule as `j_hat_z`.
    pub fn j_hat_zz(&self, t: f64, z: f64) -> f64 {
        let b = self.boundary_at(t);
        let dz = 1e-4_f64.max(1e-4 * z);
        if z <= b {
            0.0
        } else if z - 2.0 * dz <= b {
            (2.0 * self.j_hat(t, z) - 5.0 * self.j_hat(t, z + dz)
                + 4.0 * self.j_hat(t, z + 2.0 * dz)
                - self.j_hat(t, z + 3.0 * dz))
                / (dz * dz)
        } else {
            (self.j_hat(t, z + dz) - 2.0 * self.j_hat(t, z) + self.j_hat(t, z - dz)) / (dz * dz)
        }
    }

    /// dj/dz = dj_hat/dz + W_z - g(t).
    pub fn j_z(&self, t: f64, z: f64) -> f64 {
        let g = g_value(&self.params, t).expect("t within horizon");
        self.j_hat_z(t, z) + self.post.w_z(t, z) - g
    }

    /// d2j/dz2 = d2j_hat/dz2 + W_zz.
    pub fn j_zz(&self, t: f64, z: f64) -> f64 {
        self.j_hat_zz(t, z) + self.post.w_zz(t, z)
    }

    /// Monte Carlo estimate (mean, standard error) of the stopped value
    /// under the optimal rule: stop when Z falls to the boundary.
    pub fn mc_j_hat(
        &self,
        t: f64,
        z: f64,
        n_paths: usize,
        n_steps: usize,
        seed: u64,
    ) -> (f64, f64) {
        self.mc_stopped_payoff(t, z, 1.0, n_paths, n_steps, seed)
    }

    /// Monte Carlo value (mean, standard error) of the threshold rule
    /// that stops when Z falls to `boundary_scale` times the solved
    /// boundary. Scale 1 prices the solved rule; any other scale prices a
    /// deliberately suboptimal rule, whose value the dual value must
    /// dominate.
    ///
    /// Z is stepped by its exact lognormal law on a uniform grid of
    /// `n_steps` steps; the waiting flow is accumulated by the trapezoid
    /// rule, with the crossing cell cut at the log-linear crossing point.
    pub fn mc_stopped_payoff(
        &self,
        t: f64,
        z: f64,
        boundary_scale: f64,
        n_paths: usize,
        n_steps: usize,
        seed: u64,
    ) -> (f64, f64) {
        assert!(n_paths >= 2 && n_steps >= 2);
        assert!(boundary_scale > 0.0 && z > 0.0);
        let p = &self.params;
        let xi = p.horizon - t;
        if xi <= 0.0 {
            return (0.0, 0.0);
        }
        if z <= boundary_scale * self.boundary_at(t) {
            // The rule stops immediately; the payoff is identically zero.
            return (0.0, 0.0);
        }
        let dt = xi / n_steps as f64;
        let theta = p.theta();
        let sqrt_dt = dt.sqrt();
        let h = self.tables.h_ref;

        // Deterministic per-node data: discount, Z drift integral, flow
        // coefficients, and the scaled barrier.
        let mut disc = vec![0.0; n_steps + 1];
        let mut drift = vec![0.0; n_steps + 1];
        let mut gam = vec![0.0; n_steps + 1];
        let mut barrier = vec![0.0; n_steps + 1];
        for i in 0..=n_steps {
            let s = i as f64 * dt;
            let im1 = integrated_mortality_pre(p, h, s);
            disc[i] = (-(p.rho * s + im1)).exp();
            drift[i] = (p.rho - p.r) * s + im1 - 0.5 * theta * theta * s;
            gam[i] = self.tables.gamma_pre_decayed(s, t + s);
            barrier[i] = boundary_scale * self.boundary_at(t + s);
        }
        let q = p.q();
        let i_amt = p.invest_amount;
        let fi = p.f_of_i();
        let flow = |disc_s: f64, gamma_s: f64, z_s: f64| {
            disc_s * (i_amt * z_s - fi * gamma_s * z_s.powf(q))
        };

        let payoffs: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
                let mut bm = 0.0f64;
                let mut acc = 0.0f64;
                let mut prev_f = flow(disc[0], gam[0], z);
                let mut prev_d = (z / barrier[0].max(f64::MIN_POSITIVE)).ln();
                for k in 1..=n_steps {
                    let dw: f64 = rng.sample::<f64, _>(StandardNormal) * sqrt_dt;
                    bm += dw;
                    let zk = z * (drift[k] - theta * bm).exp();
                    let dk = if barrier[k] > 0.0 { (zk / barrier[k]).ln() } else { f64::INFINITY };
                    if dk <= 0.0 {
                        // Crossed during this step: cut the cell at the
                        // log-linear crossing point and collect the flow
                        // up to it, evaluated on the barrier.
                        let frac = prev_d / (prev_d - dk);
                        let s_star = (k as f64 - 1.0 + frac) * dt;
                        let im1 = integrated_mortality_pre(p, h, s_star);
                        let disc_star = (-(p.rho * s_star + im1)).exp();
                        let gam_star = self.tables.gamma_pre_decayed(s_star, t + s_star);
                        let b_star = boundary_scale * self.boundary_at(t + s_star);
                        let f_star = flow(disc_star, gam_star, b_star.max(f64::MIN_POSITIVE));
                        acc += 0.5 * (prev_f + f_star) * (frac * dt);
                        return acc;
                    }
                    let fk = flow(disc[k], gam[k], zk);
                    acc += 0.5 * (prev_f + fk) * dt;
                    prev_f = fk;
                    prev_d = dk;
                }
                acc
            })
            .collect();

        let n = payoffs.len() as f64;
        let mean = payoffs.iter().sum::<f64>() / n;
        let var = payoffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }
}

/// Dual value lattice over (h, t, z), stored h-major, then t, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    pub h_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub z_grid: Vec<f64>,
    pub j_hat: Vec<f64>,
    pub j: Vec<f64>,
    pub j_z: Vec<f64>,
    pub j_zz: Vec<f64>,
}

impl ValueSurface {
    pub fn index(&self, ih: usize, it: usize, iz: usize) -> usize {
        (ih * self.t_grid.len() + it) * self.z_grid.len() + iz
    }
}

/// Evaluates the dual value and its z-derivatives over a (t, z) lattice
/// for every curve of a solved boundary surface. The evaluators are
/// built at the surface's own quadrature refinement.
pub fn solve_value_surface(
    params: &ModelParams,
    surface: &BoundarySurface,
    t_grid: &[f64],
    z_grid: &[f64],
) -> Result<ValueSurface, ValueError> {
    if t_grid.is_empty() || z_grid.is_empty() {
        return Err(ValueError::BadGrid("t and z grids must be nonempty".into()));
    }
    if t_grid.iter().any(|&t| !(0.0..=params.horizon).contains(&t)) {
        return Err(ValueError::BadGrid(format!("t nodes must lie in [0, {}]", params.horizon)));
    }
    if z_grid.iter().any(|&z| !(z > 0.0 && z.is_finite())) {
        return Err(ValueError::BadGrid("z nodes must be positive and finite".into()));
    }
    let refine = surface.meta.residual_refine;
    let mut j_hat = Vec::new();
    let mut j = Vec::new();
    let mut j_z = Vec::new();
    let mut j_zz = Vec::new();
    for curve in &surface.curves {
        let eval = PointEvaluator::with_refine(params, curve, refine)?;
        let rows: Vec<(f64, f64, f64, f64)> = t_grid
            .par_iter()
            .flat_map_iter(|&t| {
                let eval = &eval;
                z_grid.iter().map(move |&z| {
                    (eval.j_hat(t, z), eval.j(t, z), eval.j_z(t, z), eval.j_zz(t, z))
                })
            })
            .collect();
        for (a, b, c, d) in rows {
            j_hat.push(a);
            j.push(b);
            j_z.push(c);
            j_zz.push(d);
        }
    }
    Ok(ValueSurface {
        h_grid: surface.h_grid.clone(),
        t_grid: t_grid.to_vec(),
        z_grid: z_grid.to_vec(),
        j_hat,
        j,
        j_z,
        j_zz,
    })
}

/// Writes a value lattice as CSV rows (t, z, h, j_hat, j, j_z, j_zz),
/// h-major and z-minor, after any '#' manifest lines the caller wrote.
pub fn write_value_csv<W: Write>(surface: &ValueSurface, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "z", "h", "j_hat", "j", "j_z", "j_zz"]).map_err(csv_io)?;
    for (ih, h) in surface.h_grid.iter().enumerate() {
        for (it, t) in surface.t_grid.iter().enumerate() {
            for (iz, z) in surface.z_grid.iter().enumerate() {
                let k = surface.index(ih, it, iz);
                w.write_record(&[
                    format!("{t}"),
                    format!("{z}"),
                    format!("{h}"),
                    format!("{}", surface.j_hat[k]),
                    format!("{}", surface.j[k]),
                    format!("{}", surface.j_z[k]),
                    format!("{}", surface.j_zz[k]),
                ])
                .map_err(csv_io)?;
            }
        }
    }
    w.flush()
}

/// One Monte Carlo cross-check row.
#[derive(Debug, Clone, PartialEq)]
pub struct McDiagnostic {
    pub point_id: String,
    pub estimate: f64,
    pub se: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Writes Monte Carlo diagnostics as CSV rows
/// (point_id, estimate, se, n_paths, seed).
pub fn write_mc_csv<W: Write>(rows: &[McDiagnostic], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["point_id", "estimate", "se", "n_paths", "seed"]).map_err(csv_io)?;
    for r in rows {
        w.write_record(&[
            r.point_id.clone(),
            format!("{}", r.estimate),
            format!("{:e}", r.se),
            format!("{}", r.n_paths),
            format!("{}", r.seed),
        ])
        .map_err(csv_io)?;
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

    fn small_eval() -> PointEvaluator {
        let p = ModelParams::default();
        let curve = solve_curve(&p, 1000.0, 40).unwrap();
        PointEvaluator::new(&p, &curve).unwrap()
    }

    #[test]
    fn stopped_value_vanishes_at_horizon_and_in_the_stopping_region() {
        let eval = small_eval();
        let p = *eval.params();
        assert_eq!(eval.j_hat(p.horizon, 1.0), 0.0);
        let b = eval.boundary_at(0.0);
        assert_eq!(eval.j_hat(0.0, 1e-3 * b), 0.0);
        assert_eq!(eval.j_hat(0.0, 0.999 * b), 0.0);
    }

    #[test]
    fn stopped_value_on_the_boundary_matches_stored_residual_scale() {
        let p = ModelParams::default();
        let curve = solve_curve(&p, 1000.0, 40).unwrap();
        let eval = PointEvaluator::new(&p, &curve).unwrap();
        for k in [10, 25, 40] {
            let xi = curve.xi_grid[k];
            let on_boundary = eval.j_hat(p.horizon - xi, curve.values[k]);
            assert!(
                (on_boundary - curve.residuals[k]).abs() < 1e-10,
                "node {k}: {on_boundary} vs {}",
                curve.residuals[k]
            );
        }
    }

    #[test]
    fn stopped_value_is_nonnegative_and_below_the_annuity_envelope() {
        let eval = small_eval();
        let p = *eval.params();
        for t in [0.0, 7.3, 14.0, 19.5] {
            for z in [0.05, 0.3, 1.0, 4.0, 20.0] {
                let v = eval.j_hat(t, z);
                let cap = z * g_value(&p, t).unwrap();
                assert!(v >= -1e-8 * (1.0 + cap), "j_hat({t}, {z}) = {v}");
                assert!(v <= cap + 1e-8 * (1.0 + cap), "j_hat({t}, {z}) = {v} above {cap}");
            }
        }
    }

    #[test]
    fn stopped_value_slope_approaches_the_annuity_value_for_large_z() {
        // The gap decays like z^{q-1}, so it shrinks by ~20x per decade.
        let eval = small_eval();
        let g = g_value(eval.params(), 0.0).unwrap();
        let gaps: Vec<f64> =
            [1e3, 1e4, 1e5].iter().map(|&z| ((eval.j_hat_z(0.0, z) - g) / g).abs()).collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
        assert!(gaps[2] < 1e-5, "{gaps:?}");
    }

    #[test]
    fn derivatives_in_stopping_region_reduce_to_the_smooth_part() {
        let eval = small_eval();
        let b = eval.boundary_at(4.0);
        let z = 0.5 * b;
        let g = g_value(eval.params(), 4.0).unwrap();
        assert_eq!(eval.j_z(4.0, z), eval.post().w_z(4.0, z) - g);
        assert_eq!(eval.j_zz(4.0, z), eval.post().w_zz(4.0, z));
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature_in_continuation() {
        let eval = small_eval();
        let b = eval.boundary_at(0.0);
        let z = 2.0 * b;
        let exact = eval.j_hat(0.0, z);
        let (mc, se) = eval.mc_j_hat(0.0, z, 4000, 400, 20260823);
        assert!(
            (mc - exact).abs() < 3.0 * se + 5e-3 * exact.abs(),
            "quadrature {exact} vs mc {mc} +- {se}"
        );
    }

    #[test]
    fn shifted_stopping_rules_are_dominated() {
        let eval = small_eval();
        let b = eval.boundary_at(0.0);
        let z = 1.5 * b;
        let exact = eval.j_hat(0.0, z);
        for scale in [0.9, 1.1] {
            let (mc, se) = eval.mc_stopped_payoff(0.0, z, scale, 4000, 400, 77);
            assert!(exact >= mc - 2.0 * se, "scale {scale}: {exact} vs {mc} +- {se}");
        }
    }

    #[test]
    fn monte_carlo_is_deterministic_for_a_fixed_seed() {
        let eval = small_eval();
        let a = eval.mc_j_hat(2.0, 1.0, 500, 64, 9);
        let b = eval.mc_j_hat(2.0, 1.0, 500, 64, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn value_surface_rows_match_point_queries() {
        let p = ModelParams::default();
        let surface = crate::boundary::solve_surface(&p, &[2.0, 1000.0], 20).unwrap();
        let t_grid = [0.0, 10.0];
        let z_grid = [0.5, 2.0];
        let vs = solve_value_surface(&p, &surface, &t_grid, &z_grid).unwrap();
        let eval = PointEvaluator::with_refine(&p, &surface.curves[1], 4).unwrap();
        let k = vs.index(1, 0, 1);
        assert_eq!(vs.j_hat[k], eval.j_hat(0.0, 2.0));
        assert_eq!(vs.j[k], eval.j(0.0, 2.0));
        let mut out = Vec::new();
        write_value_csv(&vs, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("t,z,h,j_hat,j,j_z,j_zz\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
    }
}
