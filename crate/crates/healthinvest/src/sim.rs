//! Monte Carlo path engine for (B, Z1, H, X) under feedback policies:
//! closed-loop wealth simulation, deterministic health/mortality series,
//! and welfare estimation.
//!
//! The dual state Z1 is stepped by its exact lognormal law (its drift
//! integral is closed form along the deterministic pre-investment health
//! flow). Wealth follows Euler-Maruyama under the feedback maps: before
//! investment c* and pi* come from the dual multiplier z*(s, X_s), read
//! off a tabulated inverse of x = -J_z (or re-rooted each step in the
//! exact mode); after investment at time tau the maps are closed form,
//!
//!   c* = H2_s (X_s - g_s) / K(s),   pi* = theta (X_s - g_s) / (sigma (1 - alpha)),
//!
//! with K evaluated along the post-investment health flow from a cache
//! memoized per crossing step. Paths that violate admissibility (wealth
//! at or below zero before investment, or at or below the annuity floor
//! g_s after) are absorbed with zero further utility and counted.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::BoundarySurface;
use crate::dual::{u_of_c, PostInvestCache};
use crate::health::{health_post, health_pre, integrated_mortality_pre, mortality};
use crate::num::Pchip;
use crate::params::{g_value, ModelParams};
use crate::policy::{inverse_marginal_utility, PolicyError, PolicyEvaluator};
use crate::value::PointEvaluator;

/// Investment-timing policy driving a closed-loop simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Invest at the first grid crossing of the solved primal boundary.
    OptimalBoundary,
    /// Invest at the first step (s = 0).
    InvestImmediately,
    /// Hold the option forever, consuming nothing: a pure bank-account
    /// benchmark.
    NeverInvest,
    /// Keep the optimal consumption and portfolio feedback but invest
    /// when wealth first reaches the given fixed level.
    FixedThreshold(f64),
}

/// Simulation request: path/step counts, seed, initial state, and policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub initial_wealth: f64,
    pub initial_health: f64,
    pub policy: PolicyKind,
    /// How many leading paths keep full trajectories in the bundle.
    #[serde(default = "default_keep_trajectories")]
    pub keep_trajectories: usize,
    /// Re-root the multiplier every step instead of reading the
    /// feedback table; slow, used to validate the table.
    #[serde(default)]
    pub exact_feedback: bool,
}

fn default_keep_trajectories() -> usize {
    8
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_paths: 1000,
            n_steps: 256,
            seed: 42,
            initial_wealth: 60.0,
            initial_health: 1000.0,
            policy: PolicyKind::OptimalBoundary,
            keep_trajectories: default_keep_trajectories(),
            exact_feedback: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_paths < 1 {
            return Err("sim.n_paths must be at least 1".into());
        }
        if self.n_steps < 2 {
            return Err("sim.n_steps must be at least 2".into());
        }
        if !(self.initial_wealth > 0.0) {
            return Err(format!("sim.initial_wealth must be positive, got {}", self.initial_wealth));
        }
        if !(self.initial_health > 0.0) {
            return Err(format!("sim.initial_health must be positive, got {}", self.initial_health));
        }
        if let PolicyKind::FixedThreshold(level) = self.policy {
            if !(level > 0.0) {
                return Err(format!("fixed_threshold level must be positive, got {level}"));
            }
        }
        Ok(())
    }
}

/// Errors from the path engine.
#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    Config(String),
    Policy(PolicyError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Config(msg) => write!(f, "bad simulation config: {msg}"),
            SimError::Policy(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<PolicyError> for SimError {
    fn from(e: PolicyError) -> Self {
        SimError::Policy(e)
    }
}

/// Deterministic health and mortality series with the investment made at
/// a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct HealthMortalitySeries {
    pub times: Vec<f64>,
    pub health: Vec<f64>,
    pub mortality: Vec<f64>,
    pub invest_time: f64,
}

/// Health decays exponentially until `invest_time`, then follows the
/// post-investment closed form; mortality is evaluated pointwise on the
/// spliced path. `invest_time >= horizon` means the investment is never
/// made.
pub fn simulate_health_mortality(
    params: &ModelParams,
    h0: f64,
    invest_time: f64,
    n_steps: usize,
) -> HealthMortalitySeries {
    assert!(h0 > 0.0 && n_steps >= 2 && invest_time >= 0.0);
    let dt = params.horizon / n_steps as f64;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut health = Vec::with_capacity(n_steps + 1);
    let mut morts = Vec::with_capacity(n_steps + 1);
    let h_tau = health_pre(params, h0, invest_time.min(params.horizon));
    for k in 0..=n_steps {
        let s = k as f64 * dt;
        let h = if s <= invest_time {
            health_pre(params, h0, s)
        } else {
            health_post(params, h_tau, s - invest_time)
        };
        times.push(s);
        health.push(h);
        morts.push(mortality(params, h));
    }
    HealthMortalitySeries { times, health, mortality: morts, invest_time }
}

/// Per-path outcome summary.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSummary {
    pub path_id: usize,
    /// First grid time at which the investment was made; infinite if
    /// never.
    pub invest_time: f64,
    pub terminal_wealth: f64,
    /// Realized discounted utility, integrated by trapezoid along the
    /// path.
    pub welfare: f64,
    /// Whether the path hit the admissibility floor and was absorbed.
    pub absorbed: bool,
}

/// Full state series of one path, kept for the leading
/// `keep_trajectories` paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub path_id: usize,
    pub times: Vec<f64>,
    pub brownian: Vec<f64>,
    /// Marginal value of wealth along the path: the exact lognormal Z1
    /// before investment, the post-investment minimizer after.
    pub dual: Vec<f64>,
    pub health: Vec<f64>,
    pub mortality: Vec<f64>,
    pub wealth: Vec<f64>,
    pub consumption: Vec<f64>,
    pub allocation: Vec<f64>,
}

/// Everything a closed-loop run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub config: SimConfig,
    pub summaries: Vec<PathSummary>,
    pub trajectories: Vec<Trajectory>,
    /// Number of paths absorbed at the admissibility floor.
    pub absorbed: usize,
}

/// Pre-investment feedback read from a (t, ln x) table. Rows hold the
/// multiplier with the near-horizon K(t)^{1-alpha} factor divided out
/// (the remainder varies slowly in t, so a linear blend between rows
/// stays accurate all the way to the horizon) and the portfolio core
/// z* J_zz, both against ln x.
struct FeedbackTable {
    t_rows: Vec<f64>,
    reg_rows: Vec<Pchip>,
    pi_rows: Vec<Pchip>,
    lnx_lo: Vec<f64>,
    lnx_hi: Vec<f64>,
}

impl FeedbackTable {
    fn build(point: &PointEvaluator, n_rows: usize, n_z: usize) -> Self {
        let p = point.params();
        let horizon = p.horizon;
        let t_rows: Vec<f64> = (0..n_rows).map(|i| i as f64 * horizon / n_rows as f64).collect();
        let built: Vec<(Pchip, Pchip, f64, f64)> = t_rows
            .par_iter()
            .map(|&t| {
                let lnk = point.post().k_factor(t).ln();
                let mut lnx = Vec::with_capacity(n_z);
                let mut reg = Vec::with_capacity(n_z);
                let mut lnpi = Vec::with_capacity(n_z);
                // z descending so that x = -J_z ascends.
                for j in (0..n_z).rev() {
                    let z = 1e-6 * (1e10f64).powf(j as f64 / (n_z - 1) as f64);
                    let x = -point.j_z(t, z);
                    if !(x > 0.0) {
                        continue;
                    }
                    let pi_core = z * point.j_zz(t, z);
                    if !(pi_core > 0.0) {
                        continue;
                    }
                    let lx = x.ln();
                    if let Some(&last) = lnx.last() {
                        if !(lx > last + 1e-12) {
                            continue;
                        }
                    }
                    lnx.push(lx);
                    reg.push(z.ln() - (1.0 - p.alpha) * lnk);
                    lnpi.push(pi_core.ln());
                }
                assert!(lnx.len() >= 4, "feedback table row at t = {t} is degenerate");
                (
                    Pchip::new(&lnx, &reg).expect("strictly increasing ln x"),
                    Pchip::new(&lnx, &lnpi).expect("strictly increasing ln x"),
                    lnx[0],
                    *lnx.last().unwrap(),
                )
            })
            .collect();
        let mut reg_rows = Vec::with_capacity(n_rows);
        let mut pi_rows = Vec::with_capacity(n_rows);
        let mut lnx_lo = Vec::with_capacity(n_rows);
        let mut lnx_hi = Vec::with_capacity(n_rows);
        for (r, pi, lo, hi) in built {
            reg_rows.push(r);
            pi_rows.push(pi);
            lnx_lo.push(lo);
            lnx_hi.push(hi);
        }
        FeedbackTable { t_rows, reg_rows, pi_rows, lnx_lo, lnx_hi }
    }

    /// Multiplier and portfolio core (z*, z* J_zz) at (t, x).
    fn query(&self, point: &PointEvaluator, t: f64, x: f64) -> (f64, f64) {
        let p = point.params();
        let n = self.t_rows.len();
        let dt_row = self.t_rows[1] - self.t_rows[0];
        let pos = (t / dt_row).clamp(0.0, (n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 1);
        let lnk = point.post().k_factor(t).ln();
        let eval_row = |r: usize, lx: f64| {
            let lx = lx.clamp(self.lnx_lo[r], self.lnx_hi[r]);
            (self.reg_rows[r].eval(lx), self.pi_rows[r].eval(lx))
        };
        let lx = x.ln();
        let (reg, lnpi) = if i + 1 < n {
            let w = pos - i as f64;
            let (r0, p0) = eval_row(i, lx);
            let (r1, p1) = eval_row(i + 1, lx);
            ((1.0 - w) * r0 + w * r1, (1.0 - w) * p0 + w * p1)
        } else {
            eval_row(i, lx)
        };
        ((reg + (1.0 - p.alpha) * lnk).exp(), lnpi.exp())
    }
}

/// Newton refinement of the multiplier from a warm start, with the full
/// bracketed solve as fallback.
fn exact_multiplier(eval: &PolicyEvaluator, t: f64, x: f64, warm: f64) -> Result<f64, PolicyError> {
    let point = eval.point();
    let mut z = warm.max(1e-12);
    for _ in 0..12 {
        let f = point.j_z(t, z) + x;
        if f.abs() <= 1e-10 * (1.0 + x) {
            return Ok(z);
        }
        let fz = point.j_zz(t, z);
        if !(fz > 0.0) {
            break;
        }
        let step = f / fz;
        let next = z - step;
        z = if next > 0.0 { next } else { z * 0.5 };
    }
    eval.z_star(t, x)
}

/// Simulates the closed loop under the configured policy. The surface
/// must carry a curve solved exactly at `cfg.initial_health`.
pub fn simulate_closed_loop(
    params: &ModelParams,
    surface: &BoundarySurface,
    cfg: &SimConfig,
) -> Result<PathBundle, SimError> {
    cfg.validate().map_err(SimError::Config)?;
    let eval = PolicyEvaluator::new(params, surface, cfg.initial_health)?;
    let point = eval.point();
    let p = *params;
    let n = cfg.n_steps;
    let dt = p.horizon / n as f64;
    let sqrt_dt = dt.sqrt();
    let theta = p.theta();
    let h0 = cfg.initial_health;

    // Deterministic pre-investment series: health, mortality, exact
    // per-step survival-discount factors, the Z1 drift integral, the
    // annuity floor, and the investment trigger.
    let mut h1 = vec![0.0; n + 1];
    let mut m1 = vec![0.0; n + 1];
    let mut drift1 = vec![0.0; n + 1];
    let mut disc_pre = vec![0.0; n];
    let mut floor = vec![0.0; n + 1];
    for k in 0..=n {
        let s = k as f64 * dt;
        h1[k] = health_pre(&p, h0, s);
        m1[k] = mortality(&p, h1[k]);
        let im1 = integrated_mortality_pre(&p, h0, s);
        drift1[k] = (p.rho - p.r) * s + im1 - 0.5 * theta * theta * s;
        floor[k] = g_value(&p, s).expect("grid time within horizon");
        if k < n {
            let dim1 = integrated_mortality_pre(&p, h0, (k + 1) as f64 * dt) - im1;
            disc_pre[k] = (-(p.rho * dt + dim1)).exp();
        }
    }
    let trigger: Option<Vec<f64>> = match cfg.policy {
        PolicyKind::OptimalBoundary => {
            let mut v = Vec::with_capacity(n);
            for k in 0..n {
                v.push(eval.primal_boundary(k as f64 * dt)?);
            }
            Some(v)
        }
        PolicyKind::FixedThreshold(level) => Some(vec![level; n]),
        PolicyKind::InvestImmediately | PolicyKind::NeverInvest => None,
    };
    let needs_feedback = !matches!(cfg.policy, PolicyKind::NeverInvest);
    let table = if needs_feedback && !cfg.exact_feedback {
        Some(FeedbackTable::build(point, 64, 128))
    } else {
        None
    };
    let z0 = eval.z_star(0.0, cfg.initial_wealth)?;
    let post_caches: Mutex<HashMap<usize, Arc<PostInvestCache>>> = Mutex::new(HashMap::new());
    let cache_at = |k: usize| -> Arc<PostInvestCache> {
        let mut map = post_caches.lock().expect("cache mutex");
        map.entry(k)
            .or_insert_with(|| {
                let h_tau = health_pre(&p, h0, k as f64 * dt);
                Arc::new(PostInvestCache::new(&p, h_tau))
            })
            .clone()
    };

    let results: Vec<(PathSummary, Option<Trajectory>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path_id| {
            let keep = path_id < cfg.keep_trajectories;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ path_id as u64);
            let mut traj = keep.then(|| Trajectory {
                path_id,
                times: Vec::with_capacity(n + 1),
                brownian: Vec::with_capacity(n + 1),
                dual: Vec::with_capacity(n + 1),
                health: Vec::with_capacity(n + 1),
                mortality: Vec::with_capacity(n + 1),
                wealth: Vec::with_capacity(n + 1),
                consumption: Vec::with_capacity(n + 1),
                allocation: Vec::with_capacity(n + 1),
            });
            let mut bm = 0.0f64;
            let mut x = cfg.initial_wealth;
            let mut disc = 1.0f64;
            let mut welfare = 0.0f64;
            let mut prev_flow = f64::NAN;
            let mut absorbed = false;
            let mut invest_step: Option<usize> = None;
            let mut post_cache: Option<Arc<PostInvestCache>> = None;
            let mut warm_z = z0;
            let mut last_c = 0.0;
            let mut last_pi = 0.0;

            for k in 0..=n {
                let s = k as f64 * dt;
                // Regime switches and absorption are decided on node
                // states before the feedback is evaluated.
                let invested = invest_step.is_some();
                if !absorbed && !invested && k < n {
                    let cross = match cfg.policy {
                        PolicyKind::InvestImmediately => k == 0,
                        PolicyKind::NeverInvest => false,
                        _ => x >= trigger.as_ref().expect("trigger series")[k],
                    };
                    if cross {
                        if x > floor[k] {
                            invest_step = Some(k);
                            post_cache = Some(cache_at(k));
                        } else {
                            // Investing here would violate the annuity
                            // floor; log the path as absorbed.
                            absorbed = true;
                        }
                    }
                }
                let invested = invest_step.is_some();
                if !absorbed {
                    if invested && x <= floor[k] {
                        absorbed = true;
                        x = floor[k];
                    } else if !invested && x <= 0.0 {
                        absorbed = true;
                        x = 0.0;
                    }
                }

                // Node state and feedback.
                let (h_k, m_k) = match invest_step {
                    Some(kt) if k >= kt => {
                        let h_tau = h1[kt];
                        let h = health_post(&p, h_tau, (k - kt) as f64 * dt);
                        (h, mortality(&p, h))
                    }
                    _ => (h1[k], m1[k]),
                };
                let z1 = z0 * (drift1[k] - theta * bm).exp();
                let (c, pi, dual_k) = if absorbed {
                    (0.0, 0.0, z1)
                } else if let Some(kt) = invest_step {
                    let cache = post_cache.as_ref().expect("post cache");
                    if k == n {
                        // The consumption rate diverges at the horizon;
                        // the last cell reuses the final interior rate.
                        (last_c, last_pi, warm_z)
                    } else {
                        let y = (k - kt) as f64 * dt;
                        let k_eff = cache.k_along_flow(y, s);
                        let c = h_k * (x - floor[k]) / k_eff;
                        let pi = theta / (p.sigma * (1.0 - p.alpha)) * (x - floor[k]);
                        let c_am = p.alpha.powf(1.0 / (1.0 - p.alpha));
                        let z_hat = ((x - floor[k]) / (c_am * k_eff)).powf(p.alpha - 1.0);
                        warm_z = z_hat;
                        (c, pi, z_hat)
                    }
                } else if !needs_feedback {
                    (0.0, 0.0, z1)
                } else if k == n {
                    (last_c, last_pi, z1)
                } else {
                    let (zs, pi_core) = if cfg.exact_feedback {
                        let zs = exact_multiplier(&eval, s, x, warm_z)
                            .unwrap_or_else(|_| warm_z.max(1e-12));
                        (zs, zs * point.j_zz(s, zs))
                    } else {
                        table.as_ref().expect("feedback table").query(point, s, x)
                    };
                    warm_z = zs;
                    (inverse_marginal_utility(&p, zs, h_k), theta / p.sigma * pi_core, z1)
                };
                last_c = c;
                last_pi = pi;

                if let Some(t) = traj.as_mut() {
                    t.times.push(s);
                    t.brownian.push(bm);
                    t.dual.push(dual_k);
                    t.health.push(h_k);
                    t.mortality.push(m_k);
                    t.wealth.push(x);
                    t.consumption.push(c);
                    t.allocation.push(pi);
                }

                // Welfare trapezoid on the running discount.
                let flow = disc * u_of_c(&p, c, h_k);
                if k > 0 {
                    welfare += 0.5 * (prev_flow + flow) * dt;
                }
                prev_flow = flow;
                if k == n {
                    break;
                }

                // Advance to the next node.
                let dw: f64 = rng.sample::<f64, _>(StandardNormal);
                let outflow = if invest_step.is_some() { c + p.invest_amount } else { c };
                if !absorbed {
                    x += (p.r * x + pi * (p.mu - p.r) - outflow) * dt + pi * p.sigma * sqrt_dt * dw;
                }
                bm += sqrt_dt * dw;
                disc *= match invest_step {
                    Some(kt) => {
                        let h_next = health_post(&p, h1[kt], (k + 1 - kt) as f64 * dt);
                        (-(p.rho * dt + 0.5 * (m_k + mortality(&p, h_next)) * dt)).exp()
                    }
                    None => disc_pre[k],
                };
            }

            let summary = PathSummary {
                path_id,
                invest_time: invest_step.map_or(f64::INFINITY, |k| k as f64 * dt),
                terminal_wealth: x,
                welfare,
                absorbed,
            };
            (summary, traj)
        })
        .collect();

    let mut summaries = Vec::with_capacity(cfg.n_paths);
    let mut trajectories = Vec::new();
    let mut absorbed = 0;
    for (s, t) in results {
        absorbed += s.absorbed as usize;
        if let Some(t) = t {
            trajectories.push(t);
        }
        summaries.push(s);
    }
    Ok(PathBundle { config: *cfg, summaries, trajectories, absorbed })
}

/// Sample mean and standard error of realized welfare across paths.
pub fn welfare_estimate(bundle: &PathBundle) -> (f64, f64) {
    let n = bundle.summaries.len() as f64;
    let mean = bundle.summaries.iter().map(|s| s.welfare).sum::<f64>() / n;
    if bundle.summaries.len() < 2 {
        return (mean, 0.0);
    }
    let var = bundle.summaries.iter().map(|s| (s.welfare - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Result of the wealth-multiplier identity study at step sizes dt and
/// dt/2 on coupled Brownian paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityGapStudy {
    /// Starting wealth x0 = -J_z(0, z0), the natural gap scale.
    pub x0: f64,
    pub coarse_max: f64,
    pub fine_max: f64,
    pub coarse_mean: f64,
    pub fine_mean: f64,
}

impl IdentityGapStudy {
    /// Gap extrapolated to dt -> 0 under the order-1/2 strong error
    /// model e(dt) = C sqrt(dt) + e0, clamped at zero.
    pub fn extrapolated_max(&self) -> f64 {
        let s = 2.0f64.sqrt();
        ((s * self.fine_max - self.coarse_max) / (s - 1.0)).max(0.0)
    }

    pub fn extrapolated_mean(&self) -> f64 {
        let s = 2.0f64.sqrt();
        ((s * self.fine_mean - self.coarse_mean) / (s - 1.0)).max(0.0)
    }
}

/// Wealth-multiplier identity check: starting from x = -J_z(0, z0), the
/// optimal wealth path must track -J_z(s, Z1_s) while it stays in the
/// continuation region. Each path is simulated twice on the same
/// Brownian motion, at `n_steps` and `2 n_steps` Euler steps (the
/// coarse increments are pairwise sums of the fine normals), and the
/// absolute gap |X_s - (-J_z(s, Z1_s))| is recorded over all
/// pre-crossing nodes. The Z1-indexed feedback is used directly: along
/// the identity path z*(s, X_s) = Z1_s, so no root-finding is needed.
pub fn simulate_identity_gap(
    point: &PointEvaluator,
    z0: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> IdentityGapStudy {
    assert!(z0 > 0.0 && n_paths >= 1 && n_steps >= 2);
    let p = *point.params();
    let theta = p.theta();
    let h0 = point.h();
    let x0 = -point.j_z(0.0, z0);
    // One pre-investment Euler walk at step dt on a fixed increment
    // stream; returns (max, sum, count) of the gap over its own nodes.
    let walk = |increments: &[f64], dt: f64| -> (f64, f64, usize) {
        let sqrt_dt = dt.sqrt();
        let mut bm = 0.0f64;
        let mut x = x0;
        let mut max_gap = 0.0f64;
        let mut sum_gap = 0.0f64;
        let mut steps = 0usize;
        for (k, &dw) in increments.iter().enumerate() {
            let s = k as f64 * dt;
            let drift = (p.rho - p.r) * s + integrated_mortality_pre(&p, h0, s)
                - 0.5 * theta * theta * s;
            let z1 = z0 * (drift - theta * bm).exp();
            if z1 <= point.boundary_at(s) {
                break;
            }
            let gap = (x - (-point.j_z(s, z1))).abs();
            max_gap = max_gap.max(gap);
            sum_gap += gap;
            steps += 1;
            let c = inverse_marginal_utility(&p, z1, health_pre(&p, h0, s));
            let pi = theta / p.sigma * z1 * point.j_zz(s, z1);
            x += (p.r * x + pi * (p.mu - p.r) - c) * dt + pi * p.sigma * sqrt_dt * dw;
            bm += sqrt_dt * dw;
        }
        (max_gap, sum_gap, steps)
    };
    let per_path: Vec<[(f64, f64, usize); 2]> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let fine: Vec<f64> =
                (0..2 * n_steps).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let coarse: Vec<f64> = fine
                .chunks_exact(2)
                .map(|w| (w[0] + w[1]) / 2.0f64.sqrt())
                .collect();
            let dt = p.horizon / n_steps as f64;
            [walk(&coarse, dt), walk(&fine, dt / 2.0)]
        })
        .collect();
    let reduce = |idx: usize| {
        let max = per_path.iter().fold(0.0f64, |a, g| a.max(g[idx].0));
        let total: usize = per_path.iter().map(|g| g[idx].2).sum();
        let mean = per_path.iter().map(|g| g[idx].1).sum::<f64>() / total.max(1) as f64;
        (max, mean)
    };
    let (coarse_max, coarse_mean) = reduce(0);
    let (fine_max, fine_mean) = reduce(1);
    IdentityGapStudy { x0, coarse_max, fine_max, coarse_mean, fine_mean }
}

/// Writes per-path summaries as CSV rows
/// (path_id, invest_time, terminal_wealth, welfare, absorbed).
pub fn write_summary_csv<W: Write>(bundle: &PathBundle, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_id", "invest_time", "terminal_wealth", "welfare", "absorbed"])
        .map_err(csv_io)?;
    for s in &bundle.summaries {
        w.write_record(&[
            format!("{}", s.path_id),
            format!("{}", s.invest_time),
            format!("{}", s.terminal_wealth),
            format!("{}", s.welfare),
            format!("{}", s.absorbed),
        ])
        .map_err(csv_io)?;
    }
    w.flush()
}

/// Writes the kept trajectories as CSV rows (path_id, s, brownian, dual,
/// health, mortality, wealth, consumption, allocation), decimated to at
/// most `max_rows` rows per path.
pub fn write_trajectory_csv<W: Write>(
    bundle: &PathBundle,
    max_rows: usize,
    out: W,
) -> std::io::Result<()> {
    assert!(max_rows >= 2);
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "path_id",
        "s",
        "brownian",
        "dual",
        "health",
        "mortality",
        "wealth",
        "consumption",
        "allocation",
    ])
    .map_err(csv_io)?;
    for t in &bundle.trajectories {
        let len = t.times.len();
        let stride = len.div_ceil(max_rows).max(1);
        for k in (0..len).step_by(stride).chain((len - 1..len).filter(|_| (len - 1) % stride != 0))
        {
            w.write_record(&[
                format!("{}", t.path_id),
                format!("{}", t.times[k]),
                format!("{}", t.brownian[k]),
                format!("{}", t.dual[k]),
                format!("{}", t.health[k]),
                format!("{}", t.mortality[k]),
                format!("{}", t.wealth[k]),
                format!("{}", t.consumption[k]),
                format!("{}", t.allocation[k]),
            ])
            .map_err(csv_io)?;
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
    use crate::boundary::solve_surface;

    fn small_surface(p: &ModelParams) -> BoundarySurface {
        solve_surface(p, &[1000.0], 40).unwrap()
    }

    #[test]
    fn health_series_splices_continuously_with_a_slope_kink() {
        let p = ModelParams::default();
        let series = simulate_health_mortality(&p, 1000.0, 10.0, 400);
        let dt = p.horizon / 400.0;
        let k_tau = (10.0 / dt).round() as usize;
        // Continuity at the splice node.
        let before = health_pre(&p, 1000.0, 10.0);
        assert!((series.health[k_tau] - before).abs() < 1e-9);
        // Slope jump of +f(I): compare one-sided differences.
        let slope_before = (series.health[k_tau] - series.health[k_tau - 1]) / dt;
        let slope_after = (series.health[k_tau + 1] - series.health[k_tau]) / dt;
        let jump = slope_after - slope_before;
        assert!((jump - p.f_of_i()).abs() < 0.05 * p.f_of_i(), "kink {jump} vs {}", p.f_of_i());
    }

    #[test]
    fn never_investing_decays_exponentially() {
        let p = ModelParams::default();
        let series = simulate_health_mortality(&p, 1000.0, p.horizon, 50);
        for (k, &h) in series.health.iter().enumerate() {
            let s = series.times[k];
            assert!((h - 1000.0 * (-p.delta * s).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn frail_start_gives_eventually_decreasing_post_investment_mortality() {
        let p = ModelParams::default();
        let series = simulate_health_mortality(&p, 100.0, 0.0, 200);
        // Mortality rises with decaying health pre-investment; after the
        // investment health grows, so mortality eventually falls while
        // staying above the baseline.
        let tail = &series.mortality[100..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(series.mortality.iter().all(|&m| m > p.m0));
    }

    #[test]
    fn never_invest_is_a_deterministic_bank_account() {
        let p = ModelParams::default();
        let surface = small_surface(&p);
        let cfg = SimConfig {
            n_paths: 3,
            n_steps: 64,
            policy: PolicyKind::NeverInvest,
            keep_trajectories: 3,
            ..SimConfig::default()
        };
        let bundle = simulate_closed_loop(&p, &surface, &cfg).unwrap();
        let dt = p.horizon / 64.0;
        let expected = cfg.initial_wealth * (1.0 + p.r * dt).powi(64);
        for s in &bundle.summaries {
            assert!((s.terminal_wealth - expected).abs() < 1e-9);
            assert_eq!(s.welfare, 0.0);
            assert!(s.invest_time.is_infinite());
        }
        // Forward Euler of dx = r x dt tracks e^{rT} to first order.
        assert!((expected - cfg.initial_wealth * (p.r * p.horizon).exp()).abs() < 0.01 * expected);
    }

    #[test]
    fn fixed_seed_reproduces_the_bundle_exactly() {
        let p = ModelParams::default();
        let surface = small_surface(&p);
        let cfg = SimConfig { n_paths: 20, n_steps: 32, ..SimConfig::default() };
        let a = simulate_closed_loop(&p, &surface, &cfg).unwrap();
        let b = simulate_closed_loop(&p, &surface, &cfg).unwrap();
        assert_eq!(a, b);
        let other = simulate_closed_loop(&p, &surface, &SimConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.summaries, other.summaries);
    }

    #[test]
    fn infeasible_immediate_investment_absorbs_with_zero_welfare() {
        let p = ModelParams::default();
        let surface = small_surface(&p);
        let cfg = SimConfig {
            n_paths: 2,
            n_steps: 16,
            initial_wealth: 10.0,
            policy: PolicyKind::InvestImmediately,
            ..SimConfig::default()
        };
        let bundle = simulate_closed_loop(&p, &surface, &cfg).unwrap();
        assert_eq!(bundle.absorbed, 2);
        assert!(bundle.summaries.iter().all(|s| s.welfare == 0.0 && s.absorbed));
    }

    #[test]
    fn wealth_tracks_the_dual_identity_under_step_halving() {
        let p = ModelParams::default();
        let curve = crate::boundary::solve_curve(&p, 1000.0, 40).unwrap();
        let point = PointEvaluator::new(&p, &curve).unwrap();
        let z0 = 2.0 * point.boundary_at(0.0);
        let study = simulate_identity_gap(&point, z0, 16, 256, 7);
        assert!(
            study.fine_max < study.coarse_max,
            "halving the step must shrink the gap: {} -> {}",
            study.coarse_max,
            study.fine_max
        );
        assert!(study.fine_mean < study.coarse_mean);
        // The mean gap extrapolated to dt -> 0 should be a small
        // fraction of the wealth scale even at this coarse resolution.
        assert!(
            study.extrapolated_mean() < 0.05 * study.x0,
            "extrapolated mean {} vs x0 {}",
            study.extrapolated_mean(),
            study.x0
        );
    }

    #[test]
    fn table_feedback_matches_the_exact_mode_closely() {
        let p = ModelParams::default();
        let surface = small_surface(&p);
        let base = SimConfig { n_paths: 4, n_steps: 64, keep_trajectories: 4, ..SimConfig::default() };
        let fast = simulate_closed_loop(&p, &surface, &base).unwrap();
        let slow = simulate_closed_loop(
            &p,
            &surface,
            &SimConfig { exact_feedback: true, ..base },
        )
        .unwrap();
        for (a, b) in fast.summaries.iter().zip(&slow.summaries) {
            assert_eq!(a.invest_time, b.invest_time);
            let rel = (a.terminal_wealth - b.terminal_wealth).abs() / (1.0 + b.terminal_wealth.abs());
            assert!(rel < 5e-3, "terminal wealth {} vs {}", a.terminal_wealth, b.terminal_wealth);
            let relw = (a.welfare - b.welfare).abs() / (1.0 + b.welfare.abs());
            assert!(relw < 5e-3, "welfare {} vs {}", a.welfare, b.welfare);
        }
    }

    #[test]
    fn summary_and_trajectory_csv_shapes() {
        let p = ModelParams::default();
        let surface = small_surface(&p);
        let cfg = SimConfig { n_paths: 5, n_steps: 40, keep_trajectories: 2, ..SimConfig::default() };
        let bundle = simulate_closed_loop(&p, &surface, &cfg).unwrap();
        assert_eq!(bundle.trajectories.len(), 2);
        let mut out = Vec::new();
        write_summary_csv(&bundle, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("path_id,invest_time,terminal_wealth,welfare,absorbed\n"));
        assert_eq!(text.lines().count(), 6);
        let mut out = Vec::new();
        write_trajectory_csv(&bundle, 10, &mut out).unwrap();
        let rows = String::from_utf8(out).unwrap();
        assert!(rows.lines().count() <= 1 + 2 * 11);
        assert!(rows.starts_with("path_id,s,brownian,dual,health,mortality,wealth,consumption"));
    }
}
