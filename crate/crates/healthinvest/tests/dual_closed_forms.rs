//! Verification of the post-investment dual value W, the factor Gamma, and
//! every partial derivative against independent oracles: centered finite
//! differences of W itself, mesh refinement, a Monte Carlo estimate from
//! exact lognormal dual-state paths, and an a-priori bound on W_h.

use healthinvest::dual::{
    boundary_upper_bound, gamma_fn, mc_w, pde_residual, u_hat, w_partials, DualPoint,
    PostInvestCache,
};
use healthinvest::params::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T_GRID: [f64; 3] = [0.0, 10.0, 19.0];
const Z_GRID: [f64; 3] = [0.5, 1.0, 2.0];
const H_GRID: [f64; 3] = [2.0, 100.0, 1000.0];

fn rel_gap(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

/// Caches at h and h +/- dh, for h-direction differences. The wide pair
/// backs the w_hh check: at large h the curvature of W in h is a ~1e-10
/// relative effect, so the step must grow with h for the difference signal
/// to clear the quadrature noise floor of the two independent caches.
struct HTriple {
    mid: PostInvestCache,
    up: PostInvestCache,
    down: PostInvestCache,
    dh: f64,
    up_wide: PostInvestCache,
    down_wide: PostInvestCache,
    dh_wide: f64,
}

impl HTriple {
    fn new(params: &ModelParams, h: f64) -> Self {
        let dh = 1e-5 * (1.0 + h.abs());
        let dh_wide = 3e-3 * (1.0 + h.abs());
        HTriple {
            mid: PostInvestCache::new(params, h),
            up: PostInvestCache::new(params, h + dh),
            down: PostInvestCache::new(params, h - dh),
            dh,
            up_wide: PostInvestCache::new(params, h + dh_wide),
            down_wide: PostInvestCache::new(params, h - dh_wide),
            dh_wide,
        }
    }
}

#[test]
fn first_partials_match_centered_differences() {
    let p = ModelParams::default();
    for h in H_GRID {
        let triple = HTriple::new(&p, h);
        for t in T_GRID {
            let dt = 1e-5 * (1.0 + t.abs());
            for z in Z_GRID {
                let dz = 1e-5 * (1.0 + z.abs());
                let bundle = triple.mid.w_partials(t, z);

                let fd_z = (triple.mid.w(t, z + dz) - triple.mid.w(t, z - dz)) / (2.0 * dz);
                assert!(
                    rel_gap(bundle.w_z, fd_z) < 1e-4,
                    "w_z at (t={t}, z={z}, h={h}): analytic {} vs fd {fd_z}",
                    bundle.w_z
                );

                let fd_h = (triple.up.w(t, z) - triple.down.w(t, z)) / (2.0 * triple.dh);
                assert!(
                    rel_gap(bundle.w_h, fd_h) < 1e-4,
                    "w_h at (t={t}, z={z}, h={h}): analytic {} vs fd {fd_h}",
                    bundle.w_h
                );

                let fd_t = (triple.mid.w(t + dt, z) - triple.mid.w(t - dt, z)) / (2.0 * dt);
                assert!(
                    rel_gap(bundle.w_t, fd_t) < 1e-4,
                    "w_t at (t={t}, z={z}, h={h}): analytic {} vs fd {fd_t}",
                    bundle.w_t
                );

                let fd_zz = (triple.mid.w(t, z + dz) - 2.0 * triple.mid.w(t, z)
                    + triple.mid.w(t, z - dz))
                    / (dz * dz);
                assert!(
                    rel_gap(triple.mid.w_zz(t, z), fd_zz) < 1e-4,
                    "w_zz at (t={t}, z={z}, h={h})"
                );
            }
        }
    }
}

#[test]
fn second_partials_match_differences_of_w_h() {
    let p = ModelParams::default();
    for h in H_GRID {
        let triple = HTriple::new(&p, h);
        for t in T_GRID {
            let dt = 1e-5 * (1.0 + t.abs());
            for z in Z_GRID {
                let dz = 1e-5 * (1.0 + z.abs());
                let bundle = triple.mid.w_partials(t, z);

                let fd_hh = (triple.up_wide.w_partials(t, z).w_h
                    - triple.down_wide.w_partials(t, z).w_h)
                    / (2.0 * triple.dh_wide);
                assert!(
                    rel_gap(bundle.w_hh, fd_hh) < 1e-4,
                    "w_hh at (t={t}, z={z}, h={h}): analytic {} vs fd {fd_hh}",
                    bundle.w_hh
                );

                let fd_hz = (triple.mid.w_partials(t, z + dz).w_h
                    - triple.mid.w_partials(t, z - dz).w_h)
                    / (2.0 * dz);
                assert!(
                    rel_gap(bundle.w_hz, fd_hz) < 1e-4,
                    "w_hz at (t={t}, z={z}, h={h}): analytic {} vs fd {fd_hz}",
                    bundle.w_hz
                );

                let fd_ht = (triple.mid.w_partials(t + dt, z).w_h
                    - triple.mid.w_partials(t - dt, z).w_h)
                    / (2.0 * dt);
                assert!(
                    rel_gap(bundle.w_ht, fd_ht) < 1e-4,
                    "w_ht at (t={t}, z={z}, h={h}): analytic {} vs fd {fd_ht}",
                    bundle.w_ht
                );
            }
        }
    }
}

#[test]
fn gamma_factor_reproduces_w_h() {
    let p = ModelParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let t = rng.gen_range(0.0..19.9);
        let z = (rng.gen_range(-2.0..2.0) as f64).exp();
        let h = rng.gen_range(1.0..2000.0);
        let gamma = gamma_fn(&p, t, h).unwrap();
        let w_h = w_partials(&p, &DualPoint::new(t, z, h)).unwrap().w_h;
        assert!(
            rel_gap(z.powf(p.q()) * gamma, w_h) < 1e-8,
            "Gamma inconsistency at (t={t}, z={z}, h={h})"
        );
        assert!(gamma > 0.0);
    }
    for h in H_GRID {
        assert_eq!(gamma_fn(&p, p.horizon, h).unwrap(), 0.0);
    }
}

#[test]
fn w_h_respects_a_priori_bound() {
    // 0 <= W_h <= z^{alpha/(alpha-1)} c_alpha C0(h) e^{c1 T} / c1 with
    // C0(h) = [m1 h^{-kappa-1} (h + f(I)/delta) / ((1-alpha) delta)] e^{delta kappa T} + 1
    // c1 = (1/2)(alpha theta / (1-alpha))^2 + alpha (r + theta^2/2)/(1-alpha).
    let p = ModelParams::default();
    let theta = p.theta();
    let c1 = 0.5 * (p.alpha * theta / (1.0 - p.alpha)).powi(2)
        + p.alpha / (1.0 - p.alpha) * (p.r + 0.5 * theta * theta);
    for h in H_GRID {
        let c0 = p.m1 * h.powf(-p.kappa - 1.0) * (h + p.f_of_i() / p.delta)
            / ((1.0 - p.alpha) * p.delta)
            * (p.delta * p.kappa * p.horizon).exp()
            + 1.0;
        for t in T_GRID {
            for z in Z_GRID {
                let w_h = w_partials(&p, &DualPoint::new(t, z, h)).unwrap().w_h;
                let cap = z.powf(p.q()) * p.c_alpha() * c0 * (c1 * p.horizon).exp() / c1;
                assert!(w_h >= 0.0, "W_h negative at (t={t}, z={z}, h={h})");
                assert!(w_h <= cap, "W_h {w_h} exceeds bound {cap} at (t={t}, z={z}, h={h})");
            }
        }
    }
}

#[test]
fn w_hz_is_negative_before_horizon() {
    let p = ModelParams::default();
    for h in H_GRID {
        for t in T_GRID {
            for z in Z_GRID {
                let w_hz = w_partials(&p, &DualPoint::new(t, z, h)).unwrap().w_hz;
                assert!(w_hz < 0.0, "w_hz = {w_hz} at (t={t}, z={z}, h={h})");
            }
        }
    }
}

#[test]
fn pde_residual_vanishes_at_interior_points() {
    let p = ModelParams::default();
    for h in H_GRID {
        for t in T_GRID {
            for z in Z_GRID {
                let (res, scale) = pde_residual(&p, &DualPoint::new(t, z, h)).unwrap();
                assert!(
                    res.abs() <= 1e-6 * scale,
                    "residual {res} vs scale {scale} at (t={t}, z={z}, h={h})"
                );
            }
        }
    }
}

#[test]
fn convexity_in_z_holds_at_sampled_points() {
    let p = ModelParams::default();
    for h in H_GRID {
        let cache = PostInvestCache::new(&p, h);
        for t in T_GRID {
            for z in Z_GRID {
                assert!(cache.w_zz(t, z) > 0.0);
            }
        }
    }
}

#[test]
fn dual_utility_shape() {
    let p = ModelParams::default();
    // Decreasing in z, linear in h.
    let mut prev = f64::INFINITY;
    for z in [0.1, 0.5, 1.0, 5.0, 25.0] {
        let v = u_hat(&p, z, 10.0);
        assert!(v < prev);
        prev = v;
    }
    let base = u_hat(&p, 0.7, 1.0);
    for h in [2.0, 100.0, 1000.0] {
        assert!(rel_gap(u_hat(&p, 0.7, h), base * h) < 1e-12);
    }
}

#[test]
fn upper_bound_refines_and_degenerates_at_horizon() {
    let p = ModelParams::default();
    let g = boundary_upper_bound(&p, 10.0, 1000.0).unwrap();
    assert!(g.is_finite() && g > 0.0);

    // Mesh-refinement oracle: 4x finer tables must agree to 1e-6 relative.
    let fine = PostInvestCache::with_resolution(&p, 1000.0, 4 * 4096);
    let gamma_fine = fine.gamma(10.0);
    let ratio = p.invest_amount / p.f_of_i();
    let g_fine = ratio.powf(p.alpha - 1.0) * gamma_fine.powf(1.0 - p.alpha);
    assert!(rel_gap(g, g_fine) < 1e-6, "coarse {g} vs fine {g_fine}");

    assert_eq!(boundary_upper_bound(&p, p.horizon, 1000.0).unwrap(), 0.0);
}

#[test]
fn upper_bound_is_continuous_in_time() {
    let p = ModelParams::default();
    for h in [2.0, 1000.0] {
        let n = 400;
        let dt = p.horizon / n as f64;
        let mut prev = boundary_upper_bound(&p, 0.0, h).unwrap();
        let mut max_jump = 0.0f64;
        for i in 1..n {
            // Stop short of T where the bound drops to 0 with infinite slope
            // (Gamma^{1-alpha} with Gamma -> 0 linearly).
            let g = boundary_upper_bound(&p, i as f64 * dt, h).unwrap();
            max_jump = max_jump.max((g - prev).abs());
            prev = g;
        }
        assert!(
            max_jump < 50.0 * dt,
            "adjacent bound values jump by {max_jump} at h={h} with dt={dt}"
        );
    }
}

#[test]
fn w_matches_monte_carlo_from_exact_dual_paths() {
    let p = ModelParams::default();
    let cache = PostInvestCache::new(&p, 1000.0);
    let analytic = cache.w(0.0, 1.0);
    let (estimate, se) = mc_w(&p, 0.0, 1.0, 1000.0, 20_000, 256, 20240817);
    assert!(
        (estimate - analytic).abs() < 3.0 * se,
        "MC {estimate} +/- {se} vs analytic {analytic}"
    );
    assert!(se < 0.01 * analytic, "standard error unexpectedly large: {se}");
}
