//! Closed-form dual-side quantities after the health investment: the dual
//! utility u_hat, the post-investment dual value W, the factor Gamma with
//! W_h = z^{alpha/(alpha-1)} Gamma, and every partial of W the boundary
//! solver and the primal transform need.
//!
//! Everything reduces to one-dimensional integrals in time-to-go of smooth
//! factors built from the post-investment health path. Those integrals are
//! precomputed once per (params, h) on a fine uniform grid as cumulative
//! tables (`PostInvestCache`) and queried by cubic Hermite interpolation
//! with the exact integrand as derivative, so each W or Gamma evaluation is
//! O(1) after the sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::fmt;

use crate::health::{health_post, mortality};
use crate::num::{cumulative_eval, cumulative_uniform};
use crate::params::ModelParams;

/// Evaluation coordinate on the dual side: time, dual state, health.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualPoint {
    pub t: f64,
    pub z: f64,
    pub h: f64,
}

impl DualPoint {
    pub fn new(t: f64, z: f64, h: f64) -> Self {
        DualPoint { t, z, h }
    }

    fn check(&self, params: &ModelParams) -> Result<(), DualError> {
        if !(0.0..=params.horizon).contains(&self.t) || !self.t.is_finite() {
            return Err(DualError::InvalidPoint(format!("t = {} outside [0, {}]", self.t, params.horizon)));
        }
        if !(self.z > 0.0) || !self.z.is_finite() {
            return Err(DualError::InvalidPoint(format!("z must be positive and finite, got {}", self.z)));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(DualError::InvalidPoint(format!("h must be positive and finite, got {}", self.h)));
        }
        Ok(())
    }
}

/// W and its first/second partials at one dual point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WDerivBundle {
    pub w: f64,
    pub w_z: f64,
    pub w_h: f64,
    pub w_t: f64,
    pub w_hh: f64,
    pub w_hz: f64,
    pub w_ht: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DualError {
    InvalidPoint(String),
}

impl fmt::Display for DualError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DualError::InvalidPoint(msg) => write!(f, "invalid dual point: {msg}"),
        }
    }
}

impl std::error::Error for DualError {}

/// Dual (convex-conjugate) utility rate: u_hat(z,h) = (1-alpha)(z/alpha)^{alpha/(alpha-1)} h.
pub fn u_hat(params: &ModelParams, z: f64, h: f64) -> f64 {
    debug_assert!(z > 0.0 && h > 0.0);
    (1.0 - params.alpha) * (z / params.alpha).powf(params.q()) * h
}

/// Primal utility rate over consumption and health: u(c,h) = c^alpha h^{1-alpha},
/// the Legendre partner of `u_hat`: u_hat(z,h) = sup_c [u(c,h) - z c].
pub fn u_of_c(params: &ModelParams, c: f64, h: f64) -> f64 {
    debug_assert!(c >= 0.0 && h > 0.0);
    c.powf(params.alpha) * h.powf(1.0 - params.alpha)
}

/// Default fine-grid interval count for the per-h cumulative tables.
/// Composite-Simpson prefixes at this resolution carry ~1e-10 relative
/// truncation on the 20-year default horizon, two orders below every
/// downstream tolerance.
pub const DEFAULT_CACHE_INTERVALS: usize = 4096;

/// Extra tabulated time-to-go beyond the horizon. The integrands extend
/// smoothly past T, and the pad lets centered finite differences straddle
/// t = 0 without clamping bias.
const CACHE_PAD: f64 = 0.5;

/// Cumulative tables for one (params, h): all time-to-go integrals behind
/// W, Gamma, and their partials. Immutable after construction; shareable
/// across threads.
#[derive(Debug, Clone)]
pub struct PostInvestCache {
    params: ModelParams,
    /// Health at investment this cache was built for.
    pub h: f64,
    dx: f64,
    n: usize,
    /// Tabulated range [0, horizon + pad].
    span: f64,
    /// Exponent slope: alpha(r + theta^2/2)/(1-alpha) + theta^2 alpha^2 / (2(alpha-1)^2).
    c_a: f64,
    /// m1 kappa / (1 - alpha).
    mk1: f64,
    /// Samples of H2^{-kappa} and its cumulative (for the mortality integral).
    r_int: Vec<f64>,
    r_cum: Vec<f64>,
    /// Samples/cumulative of H2^{-kappa-1} e^{-delta s}.
    p_int: Vec<f64>,
    p_cum: Vec<f64>,
    /// Samples/cumulative of A(s) H2(s) (the W integrand over time-to-go).
    k_int: Vec<f64>,
    k_cum: Vec<f64>,
    /// Samples/cumulative of A(s) B(s) (the W_h integrand, before c_alpha).
    g_int: Vec<f64>,
    g_cum: Vec<f64>,
    /// Samples/cumulative of the W_hh integrand (before z^q c_alpha).
    g2_int: Vec<f64>,
    g2_cum: Vec<f64>,
}

impl PostInvestCache {
    pub fn new(params: &ModelParams, h: f64) -> Self {
        Self::with_resolution(params, h, DEFAULT_CACHE_INTERVALS)
    }

    /// Builds the tables with `n_intervals` uniform subdivisions of [0, T].
    pub fn with_resolution(params: &ModelParams, h: f64, n_intervals: usize) -> Self {
        assert!(h > 0.0, "cache requires positive health, got {h}");
        assert!(n_intervals >= 8, "cache needs at least 8 intervals");
        let n = n_intervals + 1;
        let span = params.horizon + CACHE_PAD;
        let dx = span / n_intervals as f64;
        let theta = params.theta();
        let am1 = params.alpha - 1.0;
        let c_a = params.alpha * (params.r + 0.5 * theta * theta) / (1.0 - params.alpha)
            + theta * theta * params.alpha * params.alpha / (2.0 * am1 * am1);
        let mk1 = params.m1 * params.kappa / (1.0 - params.alpha);
        let fd = params.f_of_i() / params.delta;

        let mut r_int = vec![0.0; n];
        let mut p_int = vec![0.0; n];
        let mut q_int = vec![0.0; n];
        let mut h2s = vec![0.0; n];
        let mut decays = vec![0.0; n];
        for i in 0..n {
            let s = i as f64 * dx;
            let decay = (-params.delta * s).exp();
            let h2 = h * decay + fd * (1.0 - decay);
            let hk = h2.powf(-params.kappa);
            h2s[i] = h2;
            decays[i] = decay;
            r_int[i] = hk;
            p_int[i] = hk / h2 * decay;
            q_int[i] = p_int[i] / h2 * decay;
        }
        let r_cum = cumulative_uniform(dx, &r_int);
        let p_cum = cumulative_uniform(dx, &p_int);
        let q_cum = cumulative_uniform(dx, &q_int);

        let mut k_int = vec![0.0; n];
        let mut g_int = vec![0.0; n];
        let mut g2_int = vec![0.0; n];
        for i in 0..n {
            let s = i as f64 * dx;
            let im2 = params.m0 * s + params.m1 * r_cum[i];
            let a = (c_a * s + (params.rho * s + im2) / am1).exp();
            let b = mk1 * p_cum[i] * h2s[i] + decays[i];
            k_int[i] = a * h2s[i];
            g_int[i] = a * b;
            g2_int[i] = a
                * mk1
                * (mk1 * p_cum[i] * p_cum[i] * h2s[i] + 2.0 * p_cum[i] * decays[i]
                    - (params.kappa + 1.0) * q_cum[i] * h2s[i]);
        }
        let k_cum = cumulative_uniform(dx, &k_int);
        let g_cum = cumulative_uniform(dx, &g_int);
        let g2_cum = cumulative_uniform(dx, &g2_int);

        PostInvestCache {
            params: *params,
            h,
            dx,
            n,
            span,
            c_a,
            mk1,
            r_int,
            r_cum,
            p_int,
            p_cum,
            k_int,
            k_cum,
            g_int,
            g_cum,
            g2_int,
            g2_cum,
        }
    }

    fn clamp_y(&self, y: f64) -> f64 {
        y.clamp(0.0, self.span)
    }

    /// Integrated post-investment mortality over [0, s] from this cache's h.
    pub fn im2(&self, s: f64) -> f64 {
        let s = self.clamp_y(s);
        self.params.m0 * s + self.params.m1 * cumulative_eval(0.0, self.dx, &self.r_cum, &self.r_int, s)
    }

    /// Discount/drift factor A(s) of the time-to-go integrands.
    pub fn a_factor(&self, s: f64) -> f64 {
        let s = self.clamp_y(s);
        (self.c_a * s + (self.params.rho * s + self.im2(s)) / (self.params.alpha - 1.0)).exp()
    }

    fn p_at(&self, s: f64) -> f64 {
        cumulative_eval(0.0, self.dx, &self.p_cum, &self.p_int, self.clamp_y(s))
    }

    fn b_factor(&self, s: f64) -> f64 {
        let decay = (-self.params.delta * s).exp();
        let h2 = health_post(&self.params, self.h, s);
        self.mk1 * self.p_at(s) * h2 + decay
    }

    /// K(t, h) = integral over s in [0, T-t] of A(s) H2(s) ds.
    pub fn k_factor(&self, t: f64) -> f64 {
        let y = self.clamp_y(self.params.horizon - t);
        cumulative_eval(0.0, self.dx, &self.k_cum, &self.k_int, y)
    }

    /// Gamma(t, h) with the c_alpha prefactor folded in, so that
    /// W_h(t, z, h) = z^{alpha/(alpha-1)} Gamma(t, h) exactly.
    pub fn gamma(&self, t: f64) -> f64 {
        let y = self.clamp_y(self.params.horizon - t);
        self.params.c_alpha() * cumulative_eval(0.0, self.dx, &self.g_cum, &self.g_int, y)
    }

    /// Second-h-derivative factor: W_hh = z^{alpha/(alpha-1)} * gamma_hh(t).
    pub fn gamma_hh(&self, t: f64) -> f64 {
        let y = self.clamp_y(self.params.horizon - t);
        self.params.c_alpha() * cumulative_eval(0.0, self.dx, &self.g2_cum, &self.g2_int, y)
    }

    /// W(t, z, h) = c_alpha z^{alpha/(alpha-1)} K(t, h).
    pub fn w(&self, t: f64, z: f64) -> f64 {
        self.params.c_alpha() * z.powf(self.params.q()) * self.k_factor(t)
    }

    /// W_z(t, z, h) = -alpha^{1/(1-alpha)} z^{1/(alpha-1)} K(t, h).
    pub fn w_z(&self, t: f64, z: f64) -> f64 {
        let a = self.params.alpha;
        -a.powf(1.0 / (1.0 - a)) * z.powf(1.0 / (a - 1.0)) * self.k_factor(t)
    }

    /// W_zz(t, z, h) = alpha^{1/(1-alpha)}/(1-alpha) z^{(2-alpha)/(alpha-1)} K(t, h) > 0.
    pub fn w_zz(&self, t: f64, z: f64) -> f64 {
        let a = self.params.alpha;
        a.powf(1.0 / (1.0 - a)) / (1.0 - a) * z.powf((2.0 - a) / (a - 1.0)) * self.k_factor(t)
    }

    /// All partials the solver and transform need, at (t, z) for this h.
    pub fn w_partials(&self, t: f64, z: f64) -> WDerivBundle {
        let p = &self.params;
        let q = p.q();
        let c_alpha = p.c_alpha();
        let y = self.clamp_y(p.horizon - t);
        let zq = z.powf(q);
        let k = self.k_factor(t);
        let gamma = self.gamma(t);
        let a_y = self.a_factor(y);
        let h2_y = health_post(p, self.h, y);
        WDerivBundle {
            w: c_alpha * zq * k,
            w_z: self.w_z(t, z),
            w_h: zq * gamma,
            w_t: -c_alpha * zq * a_y * h2_y,
            w_hh: zq * self.gamma_hh(t),
            w_hz: q * zq / z * gamma,
            w_ht: -zq * c_alpha * a_y * self.b_factor(y),
        }
    }

    /// K along the post-investment flow: with this cache built at the
    /// investment-time health h_tau, returns K(v, H2_y(h_tau)) for the
    /// current time v = tau + y without building a new cache, via
    /// [K~(y + T - v) - K~(y)] / A(y).
    pub fn k_along_flow(&self, y: f64, v: f64) -> f64 {
        let upper = self.clamp_y(y + self.params.horizon - v);
        let lower = self.clamp_y(y);
        let ku = cumulative_eval(0.0, self.dx, &self.k_cum, &self.k_int, upper);
        let kl = cumulative_eval(0.0, self.dx, &self.k_cum, &self.k_int, lower);
        (ku - kl) / self.a_factor(lower)
    }

    /// Gamma along the post-investment flow, same convention as
    /// `k_along_flow`: Gamma(v, H2_y(h_tau)).
    pub fn gamma_along_flow(&self, y: f64, v: f64) -> f64 {
        let upper = self.clamp_y(y + self.params.horizon - v);
        let lower = self.clamp_y(y);
        let gu = cumulative_eval(0.0, self.dx, &self.g_cum, &self.g_int, upper);
        let gl = cumulative_eval(0.0, self.dx, &self.g_cum, &self.g_int, lower);
        let ku = cumulative_eval(0.0, self.dx, &self.k_cum, &self.k_int, upper);
        let kl = cumulative_eval(0.0, self.dx, &self.k_cum, &self.k_int, lower);
        let e_dy = (self.params.delta * lower).exp();
        self.params.c_alpha() * e_dy / self.a_factor(lower)
            * ((gu - gl) - self.mk1 * self.p_at(lower) * (ku - kl))
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Number of table nodes (diagnostic).
    pub fn nodes(&self) -> usize {
        self.n
    }

    /// Extracts just the Gamma tables, dropping everything else. The
    /// boundary kernel tabulates Gamma over hundreds of decayed healths at
    /// once, and keeping the full cache per health would waste an order of
    /// magnitude of memory over what those queries touch.
    pub fn into_gamma_table(self) -> GammaTable {
        GammaTable {
            horizon: self.params.horizon,
            span: self.span,
            dx: self.dx,
            c_alpha: self.params.c_alpha(),
            g_int: self.g_int,
            g_cum: self.g_cum,
        }
    }
}

/// Time-indexed table of Gamma(t, h) for one fixed h. Supports the same
/// O(1) Hermite-interpolated queries as the full cache.
#[derive(Debug, Clone)]
pub struct GammaTable {
    horizon: f64,
    span: f64,
    dx: f64,
    c_alpha: f64,
    g_int: Vec<f64>,
    g_cum: Vec<f64>,
}

impl GammaTable {
    /// Gamma(t, h) with the c_alpha prefactor folded in.
    pub fn gamma(&self, t: f64) -> f64 {
        let y = (self.horizon - t).clamp(0.0, self.span);
        self.c_alpha * cumulative_eval(0.0, self.dx, &self.g_cum, &self.g_int, y)
    }
}

/// W(t, z, h), building a one-off cache. Use `PostInvestCache` directly in
/// loops that share h.
pub fn w_value(params: &ModelParams, p: &DualPoint) -> Result<f64, DualError> {
    p.check(params)?;
    Ok(PostInvestCache::new(params, p.h).w(p.t, p.z))
}

/// All partials of W at `p`. Requires t < T (the bundle is one-sided at the
/// terminal time where W vanishes identically).
pub fn w_partials(params: &ModelParams, p: &DualPoint) -> Result<WDerivBundle, DualError> {
    p.check(params)?;
    if p.t >= params.horizon {
        return Err(DualError::InvalidPoint(format!(
            "partials require t < horizon, got t = {}",
            p.t
        )));
    }
    Ok(PostInvestCache::new(params, p.h).w_partials(p.t, p.z))
}

/// W_zz at `p` (separate from the bundle; follows from the z-power form).
pub fn w_zz(params: &ModelParams, p: &DualPoint) -> Result<f64, DualError> {
    p.check(params)?;
    Ok(PostInvestCache::new(params, p.h).w_zz(p.t, p.z))
}

/// Gamma(t, h) with W_h(t,z,h) = z^{alpha/(alpha-1)} Gamma(t,h); zero at t = T.
pub fn gamma_fn(params: &ModelParams, t: f64, h: f64) -> Result<f64, DualError> {
    DualPoint::new(t, 1.0, h).check(params)?;
    Ok(PostInvestCache::new(params, h).gamma(t))
}

/// Upper bound for the dual free boundary:
/// (I/f(I))^{alpha-1} Gamma(t,h)^{1-alpha}. Returns 0 at t = T where Gamma
/// vanishes (1 - alpha > 0); near-terminal values are legitimately tiny, so
/// callers dividing by this bound must handle the degeneracy themselves.
pub fn boundary_upper_bound(params: &ModelParams, t: f64, h: f64) -> Result<f64, DualError> {
    DualPoint::new(t, 1.0, h).check(params)?;
    let gamma = PostInvestCache::new(params, h).gamma(t);
    let ratio = params.invest_amount / params.f_of_i();
    Ok(ratio.powf(params.alpha - 1.0) * gamma.powf(1.0 - params.alpha))
}

/// Residual of the post-investment PDE at an interior point:
/// W_t + (theta^2/2) z^2 W_zz + (rho - r + M(h)) z W_z + (f(I) - delta h) W_h
///   - (rho + M(h)) W + u_hat(z,h).
/// Returns (signed residual, largest absolute term) for relative scaling.
pub fn pde_residual(params: &ModelParams, p: &DualPoint) -> Result<(f64, f64), DualError> {
    p.check(params)?;
    if p.t >= params.horizon {
        return Err(DualError::InvalidPoint("PDE residual requires t < horizon".into()));
    }
    let cache = PostInvestCache::new(params, p.h);
    let b = cache.w_partials(p.t, p.z);
    let wzz = cache.w_zz(p.t, p.z);
    let theta = params.theta();
    let m = mortality(params, p.h);
    let terms = [
        b.w_t,
        0.5 * theta * theta * p.z * p.z * wzz,
        (params.rho - params.r + m) * p.z * b.w_z,
        (params.f_of_i() - params.delta * p.h) * b.w_h,
        -(params.rho + m) * b.w,
        u_hat(params, p.z, p.h),
    ];
    let residual = terms.iter().sum();
    let scale = terms.iter().fold(0.0f64, |acc, t| acc.max(t.abs()));
    Ok((residual, scale))
}

/// Monte Carlo oracle for W: simulates the post-investment dual state
/// Z2_s = z exp{ integral of (rho - r + M2) - theta^2 s / 2 - theta B_s }
/// exactly on an n_steps grid and accumulates the discounted dual utility
/// by trapezoid. Returns (estimate, standard error). Path i draws from a
/// ChaCha8 stream seeded with seed ^ i.
pub fn mc_w(
    params: &ModelParams,
    t: f64,
    z: f64,
    h: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> (f64, f64) {
    assert!(n_paths >= 2 && n_steps >= 2);
    let cache = PostInvestCache::new(params, h);
    let horizon = params.horizon - t;
    let dt = horizon / n_steps as f64;
    let theta = params.theta();
    let sqrt_dt = dt.sqrt();
    let q = params.q();

    // Deterministic per-step data: s, H2, discount e^{-(rho s + IM2)}, and
    // the drift integral of Z2 (everything except the Brownian term).
    let mut disc = vec![0.0; n_steps + 1];
    let mut drift = vec![0.0; n_steps + 1];
    let mut h2 = vec![0.0; n_steps + 1];
    for i in 0..=n_steps {
        let s = i as f64 * dt;
        let im2 = cache.im2(s);
        disc[i] = (-(params.rho * s + im2)).exp();
        drift[i] = (params.rho - params.r) * s + im2 - 0.5 * theta * theta * s;
        h2[i] = health_post(params, h, s);
    }

    let payoffs: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let mut bm = 0.0f64;
            let mut acc = 0.0f64;
            let mut prev = disc[0] * u_hat(params, z, h);
            for k in 1..=n_steps {
                let dw: f64 = rng.sample::<f64, _>(StandardNormal) * sqrt_dt;
                bm += dw;
                let z2 = z * (drift[k] - theta * bm).exp();
                let cur = disc[k] * (1.0 - params.alpha) * (z2 / params.alpha).powf(q) * h2[k];
                acc += 0.5 * dt * (prev + cur);
                prev = cur;
            }
            acc
        })
        .collect();

    let mean = payoffs.iter().sum::<f64>() / n_paths as f64;
    let var = payoffs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n_paths as f64 - 1.0);
    (mean, (var / n_paths as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w_vanishes_at_horizon() {
        let p = ModelParams::default();
        let w = w_value(&p, &DualPoint::new(20.0, 1.0, 1000.0)).unwrap();
        assert!(w.abs() < 1e-12, "W(T) = {w}");
    }

    #[test]
    fn z_scaling_law_is_exact() {
        let p = ModelParams::default();
        let cache = PostInvestCache::new(&p, 100.0);
        let w1 = cache.w(5.0, 1.0);
        for c in [0.5, 2.0, 7.5] {
            let wc = cache.w(5.0, c);
            let predicted = c.powf(p.q()) * w1;
            assert!(((wc - predicted) / wc).abs() < 1e-12);
        }
    }

    #[test]
    fn u_hat_at_z_equals_alpha() {
        let p = ModelParams::default();
        let h = 37.5;
        let got = u_hat(&p, p.alpha, h);
        assert!(((got - (1.0 - p.alpha) * h) / got).abs() < 1e-14);
    }

    #[test]
    fn flow_identities_match_fresh_caches() {
        let p = ModelParams::default();
        let h_tau = 300.0;
        let cache = PostInvestCache::new(&p, h_tau);
        for (tau, y) in [(2.0, 3.0), (5.0, 0.5), (0.0, 10.0)] {
            let v = tau + y;
            let h_v = health_post(&p, h_tau, y);
            let fresh = PostInvestCache::new(&p, h_v);
            let k_direct = fresh.k_factor(v);
            let k_flow = cache.k_along_flow(y, v);
            assert!(((k_direct - k_flow) / k_direct).abs() < 1e-9, "K flow mismatch at tau={tau} y={y}");
            let g_direct = fresh.gamma(v);
            let g_flow = cache.gamma_along_flow(y, v);
            assert!(((g_direct - g_flow) / g_direct).abs() < 1e-9, "Gamma flow mismatch at tau={tau} y={y}");
        }
    }
}
