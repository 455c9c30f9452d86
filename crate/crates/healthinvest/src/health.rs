//! Closed-form health trajectories, mortality intensity, and integrals of
//! the mortality intensity before and after the health investment.
//!
//! Before investment the health capital decays exponentially,
//! H1_s = h0 e^{-delta s}. After the lump-sum investment the drift gains
//! f(I) = I^beta, giving H2_s = h e^{-delta s} + (f(I)/delta)(1 - e^{-delta s}),
//! which relaxes toward the stationary level f(I)/delta.

use crate::num::{integrate, NumError, QuadMethod, QuadratureSpec};
use crate::params::ModelParams;

/// Pre-investment health after `s` years: h0 e^{-delta s}.
pub fn health_pre(params: &ModelParams, h0: f64, s: f64) -> f64 {
    debug_assert!(h0 > 0.0 && s >= 0.0);
    h0 * (-params.delta * s).exp()
}

/// Post-investment health `s` years after investing at health level
/// `h_at_invest`: h e^{-delta s} + (f(I)/delta)(1 - e^{-delta s}).
pub fn health_post(params: &ModelParams, h_at_invest: f64, s: f64) -> f64 {
    debug_assert!(h_at_invest > 0.0 && s >= 0.0);
    let decay = (-params.delta * s).exp();
    h_at_invest * decay + params.f_of_i() / params.delta * (1.0 - decay)
}

/// Mortality intensity at health level h: m0 + m1 h^{-kappa}.
/// Evaluated exactly at any positive h, however small; callers must keep h > 0.
pub fn mortality(params: &ModelParams, h: f64) -> f64 {
    assert!(h > 0.0, "mortality requires positive health, got {h}");
    params.m0 + params.m1 * h.powf(-params.kappa)
}

/// Exact integral of the pre-investment mortality intensity over [0, s]:
/// m0 s + (m1 h0^{-kappa} / (delta kappa)) (e^{delta kappa s} - 1).
pub fn integrated_mortality_pre(params: &ModelParams, h0: f64, s: f64) -> f64 {
    debug_assert!(h0 > 0.0 && s >= 0.0);
    let dk = params.delta * params.kappa;
    params.m0 * s + params.m1 * h0.powf(-params.kappa) / dk * ((dk * s).exp() - 1.0)
}

/// Integral of the post-investment mortality intensity over [0, s] by
/// adaptive Simpson (the integrand has no elementary antiderivative).
/// Absolute tolerance 1e-10 * (1 + s).
pub fn integrated_mortality_post(params: &ModelParams, h_at_invest: f64, s: f64) -> Result<f64, NumError> {
    debug_assert!(h_at_invest > 0.0 && s >= 0.0);
    let spec = QuadratureSpec {
        method: QuadMethod::AdaptiveSimpson,
        abs_tol: 1e-10 * (1.0 + s),
        max_depth: 40,
    };
    integrate(|u| mortality(params, health_post(params, h_at_invest, u)), 0.0, s, &spec)
}
