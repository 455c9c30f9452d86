//! Numerical library for the optimal healthcare-investment timing problem
//! in a Merton consumption/portfolio model with health-dependent mortality.
//!
//! The agent consumes, allocates wealth between a bank account and a risky
//! asset, and chooses when (if ever) to pay a one-time lump sum that boosts
//! the drift of her deteriorating health capital and thereby lowers her
//! Gompertz-Makeham-style mortality intensity. Convex duality reduces the
//! problem to a finite-horizon optimal stopping problem for a
//! health-modulated geometric Brownian motion; the free boundary solves a
//! Volterra-type integral equation handled by a recursive trapezoidal
//! scheme with per-stage bisection.
//!
//! Module map:
//! - [`params`]: model constants, validation, JSON configuration.
//! - [`health`]: closed-form health paths and mortality integrals.
//! - [`num`]: quadrature, normal CDF, root finding, interpolation.
//! - [`dual`]: closed-form post-investment dual value W and partials.
//! - [`boundary`]: recursive integral-equation solver for the free boundary.
//! - [`value`]: the stopping value J-hat, J, and z-derivatives, plus MC oracles.
//! - [`policy`]: dual-to-primal transform, consumption/portfolio feedback maps.
//! - [`sim`]: closed-loop path simulation and welfare estimates.
//! - [`verify`]: machine-readable invariant report.
//! - [`golden`]: tolerance-based golden-file regression corpus.

pub mod boundary;
pub mod dual;
pub mod golden;
pub mod health;
pub mod num;
pub mod params;
pub mod policy;
pub mod sim;
pub mod value;
pub mod verify;
