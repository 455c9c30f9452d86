//! Model constants, derived constants, validation, and JSON configuration.
//!
//! Single source of truth for every other module. All rates are annualized
//! and the time unit is years throughout the codebase.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::sim::{PolicyKind, SimConfig};

/// Market, preference, mortality, and health-production constants.
///
/// The agent consumes, invests in a risky asset, and may pay a one-time
/// lump sum `invest_amount` to boost the drift of her health capital by
/// f(I) = I^beta, lowering the mortality intensity m0 + m1 h^{-kappa}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Risk-free rate (1/year).
    pub r: f64,
    /// Expected risky return (1/year).
    pub mu: f64,
    /// Risky-asset volatility (1/sqrt(year)), > 0.
    pub sigma: f64,
    /// Subjective discount rate (1/year).
    pub rho: f64,
    /// Baseline mortality intensity (1/year).
    pub m0: f64,
    /// Endogenous mortality coefficient (1/year * health^kappa).
    pub m1: f64,
    /// Mortality convexity exponent, > 0.
    pub kappa: f64,
    /// Health depreciation rate (1/year), > 0.
    pub delta: f64,
    /// Cobb-Douglas consumption weight, in (0,1). Stored directly (the
    /// default set reports the health weight 1 - alpha = 0.7742).
    pub alpha: f64,
    /// Health-production curvature, in (0,1).
    pub beta: f64,
    /// Lump-sum health investment I (wealth units), > 0.
    pub invest_amount: f64,
    /// Horizon T (years), > 0.
    pub horizon: f64,
}

impl Default for ModelParams {
    /// Baseline parameter set used by every default run:
    /// r=0.048, mu=0.108, sigma=0.20, rho=0.05, m0=0.0237, m1=0.0017,
    /// kappa=1.80, delta=0.0055, alpha=0.2258, beta=0.19, I=2, T=20.
    fn default() -> Self {
        ModelParams {
            r: 0.048,
            mu: 0.108,
            sigma: 0.20,
            rho: 0.05,
            m0: 0.0237,
            m1: 0.0017,
            kappa: 1.80,
            delta: 0.0055,
            alpha: 0.2258,
            beta: 0.19,
            invest_amount: 2.0,
            horizon: 20.0,
        }
    }
}

impl ModelParams {
    /// Market price of risk theta = (mu - r) / sigma.
    pub fn theta(&self) -> f64 {
        (self.mu - self.r) / self.sigma
    }

    /// Health production from the lump-sum investment, f(I) = I^beta.
    pub fn f_of_i(&self) -> f64 {
        self.invest_amount.powf(self.beta)
    }

    /// Dual utility exponent q = alpha / (alpha - 1) < 0.
    pub fn q(&self) -> f64 {
        self.alpha / (self.alpha - 1.0)
    }

    /// Dual utility prefactor (1 - alpha) * alpha^{alpha/(1-alpha)}.
    pub fn c_alpha(&self) -> f64 {
        (1.0 - self.alpha) * self.alpha.powf(self.alpha / (1.0 - self.alpha))
    }

    pub fn derived(&self) -> DerivedParams {
        DerivedParams {
            theta: self.theta(),
            f_of_i: self.f_of_i(),
            r: self.r,
            invest_amount: self.invest_amount,
            horizon: self.horizon,
        }
    }
}

/// Constants computed once from `ModelParams`, plus the present-value
/// profile of the future health payment.
#[derive(Debug, Clone, Copy)]
pub struct DerivedParams {
    /// Market price of risk (mu - r) / sigma.
    pub theta: f64,
    /// Health production output I^beta (health units/year).
    pub f_of_i: f64,
    r: f64,
    invest_amount: f64,
    horizon: f64,
}

impl DerivedParams {
    /// Present value at time t of keeping the investment option alive to T:
    /// g(t) = (I/r)(1 - e^{-r(T-t)}). g(T) = 0.
    pub fn g_profile(&self, t: f64) -> f64 {
        (self.invest_amount / self.r) * (1.0 - (-self.r * (self.horizon - t)).exp())
    }
}

/// Validation failure naming the violated constraint.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamError {
    Constraint(String),
    /// Time argument outside [0, T].
    TimeOutOfRange { t: f64, horizon: f64 },
    /// JSON config could not be parsed (includes unknown-key rejections).
    Config(String),
}

impl fmt::Display for ParamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamError::Constraint(msg) => write!(f, "invalid parameter: {msg}"),
            ParamError::TimeOutOfRange { t, horizon } => {
                write!(f, "time {t} outside [0, {horizon}]")
            }
            ParamError::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for ParamError {}

/// Checks every model invariant; returns the parameters unchanged on success.
pub fn validate(params: ModelParams) -> Result<ModelParams, ParamError> {
    let c = |ok: bool, msg: &str| {
        if ok {
            Ok(())
        } else {
            Err(ParamError::Constraint(msg.to_string()))
        }
    };
    c(params.sigma > 0.0, "sigma must be positive")?;
    c(params.delta > 0.0, "delta must be positive")?;
    c(params.kappa > 0.0, "kappa must be positive")?;
    c(params.invest_amount > 0.0, "invest_amount must be positive")?;
    c(params.horizon > 0.0, "horizon must be positive")?;
    c(params.alpha > 0.0 && params.alpha < 1.0, "alpha must lie in (0,1)")?;
    c(params.beta > 0.0 && params.beta < 1.0, "beta must lie in (0,1)")?;
    c(params.m0 >= 0.0, "m0 must be nonnegative")?;
    c(params.m1 >= 0.0, "m1 must be nonnegative")?;
    c(params.r > 0.0, "r must be positive")?;
    for (name, v) in [
        ("r", params.r),
        ("mu", params.mu),
        ("sigma", params.sigma),
        ("rho", params.rho),
        ("m0", params.m0),
        ("m1", params.m1),
        ("kappa", params.kappa),
        ("delta", params.delta),
        ("alpha", params.alpha),
        ("beta", params.beta),
        ("invest_amount", params.invest_amount),
        ("horizon", params.horizon),
    ] {
        if !v.is_finite() {
            return Err(ParamError::Constraint(format!("{name} must be finite, got {v}")));
        }
    }
    Ok(params)
}

/// Present value at t of the future health payment, with domain check:
/// (I/r)(1 - e^{-r(T-t)}) for 0 <= t <= T.
pub fn g_value(params: &ModelParams, t: f64) -> Result<f64, ParamError> {
    if !(0.0..=params.horizon).contains(&t) {
        return Err(ParamError::TimeOutOfRange { t, horizon: params.horizon });
    }
    Ok((params.invest_amount / params.r) * (1.0 - (-params.r * (params.horizon - t)).exp()))
}

/// Evaluation-lattice sizes and ranges for surfaces, policies, and residual
/// refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Boundary-solver stage count n (time-to-maturity subdivisions).
    pub n_steps: usize,
    /// Health nodes for surface solves.
    pub h_values: Vec<f64>,
    /// Time nodes for value/policy lattices.
    pub n_t: usize,
    /// Dual-state nodes (log-spaced) for the value surface.
    pub n_z: usize,
    pub z_min: f64,
    pub z_max: f64,
    /// Wealth nodes for policy grids.
    pub n_x: usize,
    pub x_min: f64,
    pub x_max: f64,
    /// Residual re-evaluation mesh multiplier.
    pub refine: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_steps: 200,
            h_values: vec![2.0, 1000.0],
            n_t: 10,
            n_z: 20,
            z_min: 0.05,
            z_max: 20.0,
            n_x: 21,
            x_min: 30.0,
            x_max: 150.0,
            refine: 4,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), ParamError> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ParamError::Constraint(msg.to_string()))
            }
        };
        c(self.n_steps >= 2, "grid.n_steps must be at least 2")?;
        c(!self.h_values.is_empty(), "grid.h_values must be nonempty")?;
        c(
            self.h_values.windows(2).all(|w| w[0] < w[1]) && self.h_values[0] > 0.0,
            "grid.h_values must be strictly increasing and positive",
        )?;
        c(self.n_t >= 2, "grid.n_t must be at least 2")?;
        c(self.n_z >= 2, "grid.n_z must be at least 2")?;
        c(self.z_min > 0.0 && self.z_min < self.z_max, "grid z range must satisfy 0 < z_min < z_max")?;
        c(self.n_x >= 2, "grid.n_x must be at least 2")?;
        c(self.x_min > 0.0 && self.x_min < self.x_max, "grid x range must satisfy 0 < x_min < x_max")?;
        c(self.refine >= 1, "grid.refine must be at least 1")?;
        Ok(())
    }
}

/// Full run configuration: model constants plus lattice and simulation
/// sections.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: GridConfig,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelParams::default(), grid: GridConfig::default(), sim: SimConfig::default() }
    }
}

// Shadow structs with all-optional fields: missing keys fall back to the
// defaults (and are reported to the caller for logging) while unknown keys
// anywhere are a hard error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    r: Option<f64>,
    mu: Option<f64>,
    sigma: Option<f64>,
    rho: Option<f64>,
    m0: Option<f64>,
    m1: Option<f64>,
    kappa: Option<f64>,
    delta: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    invest_amount: Option<f64>,
    horizon: Option<f64>,
    grid: Option<RawGrid>,
    sim: Option<RawSim>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    n_steps: Option<usize>,
    h_values: Option<Vec<f64>>,
    n_t: Option<usize>,
    n_z: Option<usize>,
    z_min: Option<f64>,
    z_max: Option<f64>,
    n_x: Option<usize>,
    x_min: Option<f64>,
    x_max: Option<f64>,
    refine: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    n_paths: Option<usize>,
    n_steps: Option<usize>,
    seed: Option<u64>,
    initial_wealth: Option<f64>,
    initial_health: Option<f64>,
    policy: Option<PolicyKind>,
    keep_trajectories: Option<usize>,
    exact_feedback: Option<bool>,
}

/// Parses a JSON configuration string. Returns the filled config and the
/// dotted paths of keys that fell back to defaults.
pub fn parse_config(json: &str) -> Result<(RunConfig, Vec<String>), ParamError> {
    let raw: RawConfig = serde_json::from_str(json).map_err(|e| ParamError::Config(e.to_string()))?;
    let mut missing = Vec::new();
    let defaults = RunConfig::default();

    macro_rules! take {
        ($src:expr, $dst:expr, $name:literal) => {
            match $src {
                Some(v) => $dst = v,
                None => missing.push($name.to_string()),
            }
        };
    }

    let mut cfg = defaults;
    take!(raw.r, cfg.model.r, "r");
    take!(raw.mu, cfg.model.mu, "mu");
    take!(raw.sigma, cfg.model.sigma, "sigma");
    take!(raw.rho, cfg.model.rho, "rho");
    take!(raw.m0, cfg.model.m0, "m0");
    take!(raw.m1, cfg.model.m1, "m1");
    take!(raw.kappa, cfg.model.kappa, "kappa");
    take!(raw.delta, cfg.model.delta, "delta");
    take!(raw.alpha, cfg.model.alpha, "alpha");
    take!(raw.beta, cfg.model.beta, "beta");
    take!(raw.invest_amount, cfg.model.invest_amount, "invest_amount");
    take!(raw.horizon, cfg.model.horizon, "horizon");

    match raw.grid {
        None => missing.push("grid".to_string()),
        Some(g) => {
            take!(g.n_steps, cfg.grid.n_steps, "grid.n_steps");
            take!(g.h_values, cfg.grid.h_values, "grid.h_values");
            take!(g.n_t, cfg.grid.n_t, "grid.n_t");
            take!(g.n_z, cfg.grid.n_z, "grid.n_z");
            take!(g.z_min, cfg.grid.z_min, "grid.z_min");
            take!(g.z_max, cfg.grid.z_max, "grid.z_max");
            take!(g.n_x, cfg.grid.n_x, "grid.n_x");
            take!(g.x_min, cfg.grid.x_min, "grid.x_min");
            take!(g.x_max, cfg.grid.x_max, "grid.x_max");
            take!(g.refine, cfg.grid.refine, "grid.refine");
        }
    }
    match raw.sim {
        None => missing.push("sim".to_string()),
        Some(s) => {
            take!(s.n_paths, cfg.sim.n_paths, "sim.n_paths");
            take!(s.n_steps, cfg.sim.n_steps, "sim.n_steps");
            take!(s.seed, cfg.sim.seed, "sim.seed");
            take!(s.initial_wealth, cfg.sim.initial_wealth, "sim.initial_wealth");
            take!(s.initial_health, cfg.sim.initial_health, "sim.initial_health");
            take!(s.policy, cfg.sim.policy, "sim.policy");
            take!(s.keep_trajectories, cfg.sim.keep_trajectories, "sim.keep_trajectories");
            take!(s.exact_feedback, cfg.sim.exact_feedback, "sim.exact_feedback");
        }
    }

    validate(cfg.model)?;
    cfg.grid.validate()?;
    cfg.sim.validate().map_err(|e| ParamError::Constraint(e))?;
    Ok((cfg, missing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_set_is_accepted() {
        assert!(validate(ModelParams::default()).is_ok());
    }

    #[test]
    fn g_profile_terminal_value_is_zero() {
        let d = ModelParams::default().derived();
        assert_eq!(d.g_profile(20.0), 0.0);
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let err = parse_config(r#"{"r": 0.05, "rr": 1.0}"#).unwrap_err();
        match err {
            ParamError::Config(msg) => assert!(msg.contains("rr"), "message should name the key: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_keys_fall_back_and_are_reported() {
        let (cfg, missing) = parse_config(r#"{"r": 0.05}"#).unwrap();
        assert_eq!(cfg.model.r, 0.05);
        assert_eq!(cfg.model.mu, 0.108);
        assert!(missing.contains(&"mu".to_string()));
        assert!(missing.contains(&"grid".to_string()));
    }
}
