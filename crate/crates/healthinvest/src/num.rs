//! Shared numerical primitives: quadrature, normal CDF, bracketed root
//! finding, golden-section minimization, and monotone cubic interpolation.
//!
//! Everything here is pure and re-entrant; integrand and objective callables
//! must be re-entrant themselves when used from parallel callers.

use std::fmt;

/// Numerical-routine failures. Carries enough context to diagnose a bad
/// bracket or a tolerance miss without re-running the caller.
#[derive(Debug, Clone, PartialEq)]
pub enum NumError {
    /// Quadrature failed to reach the requested tolerance within the
    /// recursion/refinement cap. `best` is the last estimate, `err_bound`
    /// the achieved error estimate.
    QuadratureNonConvergence { best: f64, err_bound: f64, abs_tol: f64 },
    /// Root bracket does not straddle a sign change.
    NoSignChange { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    /// Root iteration cap reached before the bracket shrank to tolerance.
    RootIterationCap { best: f64, bracket_width: f64, tol: f64 },
    /// An objective or integrand returned NaN/inf where a finite value is required.
    NonFinite { at: f64 },
    /// Invalid argument (empty grid, unordered bracket, nonpositive tolerance, ...).
    Invalid(String),
}

impl fmt::Display for NumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumError::QuadratureNonConvergence { best, err_bound, abs_tol } => write!(
                f,
                "quadrature did not converge: best estimate {best:e}, achieved error bound {err_bound:e}, requested {abs_tol:e}"
            ),
            NumError::NoSignChange { lo, hi, f_lo, f_hi } => write!(
                f,
                "no sign change on bracket [{lo:e}, {hi:e}]: f(lo) = {f_lo:e}, f(hi) = {f_hi:e}"
            ),
            NumError::RootIterationCap { best, bracket_width, tol } => write!(
                f,
                "root finder hit the iteration cap: best {best:e}, bracket width {bracket_width:e}, tol {tol:e}"
            ),
            NumError::NonFinite { at } => write!(f, "non-finite function value at {at:e}"),
            NumError::Invalid(msg) => write!(f, "invalid numerical argument: {msg}"),
        }
    }
}

impl std::error::Error for NumError {}

/// Quadrature method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadMethod {
    /// Composite trapezoid with successive mesh halving until the estimate
    /// stabilizes to `abs_tol`.
    Trapezoid,
    /// Classic adaptive Simpson with per-interval tolerance splitting.
    AdaptiveSimpson,
}

/// Quadrature request: method, absolute tolerance, recursion/refinement cap.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub method: QuadMethod,
    pub abs_tol: f64,
    pub max_depth: u32,
}

impl QuadratureSpec {
    /// Default high-accuracy adaptive Simpson: 1e-10 absolute, depth 40.
    pub fn simpson_default() -> Self {
        QuadratureSpec { method: QuadMethod::AdaptiveSimpson, abs_tol: 1e-10, max_depth: 40 }
    }

    pub fn validate(&self) -> Result<(), NumError> {
        if !(self.abs_tol > 0.0) {
            return Err(NumError::Invalid(format!("abs_tol must be positive, got {}", self.abs_tol)));
        }
        if self.max_depth < 1 {
            return Err(NumError::Invalid("max_depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Root-finding request: bracket, absolute tolerance on the argument, iteration cap.
#[derive(Debug, Clone, Copy)]
pub struct BracketSpec {
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
    pub max_iter: u32,
}

impl BracketSpec {
    /// Default: 1e-10 absolute argument tolerance, 200 iterations.
    pub fn new(lo: f64, hi: f64) -> Self {
        BracketSpec { lo, hi, tol: 1e-10, max_iter: 200 }
    }

    pub fn validate(&self) -> Result<(), NumError> {
        if !(self.lo < self.hi) {
            return Err(NumError::Invalid(format!("bracket requires lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        if !(self.tol > 0.0) {
            return Err(NumError::Invalid(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Root-finder selector: bisection for reproducing the staged boundary solve,
/// Brent for fast smooth inversions (the primal transform).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootMethod {
    Bisection,
    Brent,
}

/// Standard normal CDF via the complementary error function,
/// Phi(x) = erfc(-x / sqrt(2)) / 2. Accurate to well below 1e-12 absolute.
/// Infinities map to exact 0 and 1.
pub fn normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Integrates `f` over [a, b] per `spec`. For a == b returns 0 exactly.
///
/// Trapezoid: successive halving, stops when two consecutive refinements
/// agree to `abs_tol`. Adaptive Simpson: recursive bisection with the usual
/// 15x error estimate, tolerance split across halves.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<f64, NumError> {
    spec.validate()?;
    if !(a <= b) {
        return Err(NumError::Invalid(format!("integrate requires a <= b, got [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    match spec.method {
        QuadMethod::Trapezoid => trapezoid_refine(&f, a, b, spec),
        QuadMethod::AdaptiveSimpson => {
            let fa = f(a);
            let fb = f(b);
            let m = 0.5 * (a + b);
            let fm = f(m);
            for (v, at) in [(fa, a), (fm, m), (fb, b)] {
                if !v.is_finite() {
                    return Err(NumError::NonFinite { at });
                }
            }
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            let mut worst = 0.0f64;
            let val = simpson_rec(&f, a, b, fa, fm, fb, whole, spec.abs_tol, spec.max_depth, &mut worst)?;
            if worst > spec.abs_tol {
                return Err(NumError::QuadratureNonConvergence { best: val, err_bound: worst, abs_tol: spec.abs_tol });
            }
            Ok(val)
        }
    }
}

fn trapezoid_refine<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<f64, NumError> {
    let mut n: u64 = 1;
    let mut t = 0.5 * (b - a) * (f(a) + f(b));
    if !t.is_finite() {
        return Err(NumError::NonFinite { at: a });
    }
    let mut prev = f64::INFINITY;
    for depth in 0..spec.max_depth {
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let x = a + (i as f64 + 0.5) * h;
            let v = f(x);
            if !v.is_finite() {
                return Err(NumError::NonFinite { at: x });
            }
            acc += v;
        }
        let next = 0.5 * t + 0.5 * h * acc;
        let diff = (next - t).abs();
        t = next;
        n *= 2;
        // Require two successive agreements past a minimal depth so an early
        // coincidence on a coarse mesh cannot fake convergence.
        if depth >= 2 && diff <= spec.abs_tol && prev <= spec.abs_tol {
            return Ok(t);
        }
        prev = diff;
    }
    Err(NumError::QuadratureNonConvergence { best: t, err_bound: prev, abs_tol: spec.abs_tol })
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    worst: &mut f64,
) -> Result<f64, NumError> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    for (v, at) in [(flm, lm), (frm, rm)] {
        if !v.is_finite() {
            return Err(NumError::NonFinite { at });
        }
    }
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 {
        // Leaf forced by the depth cap: record the achieved error estimate.
        let err = delta.abs() / 15.0;
        if err > *worst {
            *worst = err;
        }
        return Ok(left + right + delta / 15.0);
    }
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    let half = 0.5 * tol;
    let lv = simpson_rec(f, a, m, fa, flm, fm, left, half, depth - 1, worst)?;
    let rv = simpson_rec(f, m, b, fm, frm, fb, right, half, depth - 1, worst)?;
    Ok(lv + rv)
}

/// Finds a root of `f` inside the bracket. `f(lo)` and `f(hi)` must have
/// opposite signs (or one must vanish). Deterministic for fixed inputs; the
/// returned root always lies inside [lo, hi].
///
/// Bisection resolves exact zeros of the midpoint toward the lower end of the
/// bracket, so on a flat ~0 stretch it converges to the smallest root.
pub fn find_root<F: Fn(f64) -> f64>(f: F, spec: &BracketSpec, method: RootMethod) -> Result<f64, NumError> {
    spec.validate()?;
    let f_lo = f(spec.lo);
    let f_hi = f(spec.hi);
    if !f_lo.is_finite() {
        return Err(NumError::NonFinite { at: spec.lo });
    }
    if !f_hi.is_finite() {
        return Err(NumError::NonFinite { at: spec.hi });
    }
    if f_lo == 0.0 {
        return Ok(spec.lo);
    }
    if f_hi == 0.0 {
        return Ok(spec.hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(NumError::NoSignChange { lo: spec.lo, hi: spec.hi, f_lo, f_hi });
    }
    match method {
        RootMethod::Bisection => bisect(&f, spec, f_lo),
        RootMethod::Brent => brent(&f, spec, f_lo, f_hi),
    }
}

fn bisect<F: Fn(f64) -> f64>(f: &F, spec: &BracketSpec, f_lo: f64) -> Result<f64, NumError> {
    let (mut lo, mut hi) = (spec.lo, spec.hi);
    let lo_sign = f_lo.signum();
    for _ in 0..spec.max_iter {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= spec.tol || mid == lo || mid == hi {
            return Ok(mid);
        }
        let fm = f(mid);
        if !fm.is_finite() {
            return Err(NumError::NonFinite { at: mid });
        }
        // fm == 0 narrows from above: keeps the smallest root on flat stretches.
        if fm.signum() == lo_sign && fm != 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(NumError::RootIterationCap { best: 0.5 * (lo + hi), bracket_width: hi - lo, tol: spec.tol })
}

fn brent<F: Fn(f64) -> f64>(f: &F, spec: &BracketSpec, f_lo: f64, f_hi: f64) -> Result<f64, NumError> {
    // Brent's method: inverse quadratic interpolation guarded by bisection.
    let (mut a, mut b) = (spec.lo, spec.hi);
    let (mut fa, mut fb) = (f_lo, f_hi);
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..spec.max_iter {
        if fb.abs() > fc.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * spec.tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q.abs() - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1 * xm.signum() };
        fb = f(b);
        if !fb.is_finite() {
            return Err(NumError::NonFinite { at: b });
        }
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
    }
    Err(NumError::RootIterationCap { best: b, bracket_width: (c - b).abs(), tol: spec.tol })
}

/// Golden-section minimization of a unimodal `f` on [lo, hi]. Returns
/// (argmin, minimum). Unimodality is the caller's responsibility.
pub fn minimize_scalar<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64), NumError> {
    if !(lo < hi) {
        return Err(NumError::Invalid(format!("minimize_scalar requires lo < hi, got [{lo}, {hi}]")));
    }
    if !(tol > 0.0) {
        return Err(NumError::Invalid(format!("tol must be positive, got {tol}")));
    }
    const INVPHI: f64 = 0.618_033_988_749_894_9; // 1/phi
    const INVPHI2: f64 = 0.381_966_011_250_105_1; // 1/phi^2
    let (mut a, mut b) = (lo, hi);
    let mut x1 = a + INVPHI2 * (b - a);
    let mut x2 = a + INVPHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for (v, at) in [(f1, x1), (f2, x2)] {
        if !v.is_finite() {
            return Err(NumError::NonFinite { at });
        }
    }
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + INVPHI2 * (b - a);
            f1 = f(x1);
            if !f1.is_finite() {
                return Err(NumError::NonFinite { at: x1 });
            }
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INVPHI * (b - a);
            f2 = f(x2);
            if !f2.is_finite() {
                return Err(NumError::NonFinite { at: x2 });
            }
        }
    }
    let xm = 0.5 * (a + b);
    let fm = f(xm);
    if fm <= f1 && fm <= f2 {
        Ok((xm, fm))
    } else if f1 <= f2 {
        Ok((x1, f1))
    } else {
        Ok((x2, f2))
    }
}

/// Monotonicity-preserving piecewise cubic interpolant (Fritsch-Carlson
/// slopes). Monotone data produce a monotone interpolant; non-monotone data
/// are interpolated without overshoot at local extrema.
#[derive(Debug, Clone)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl Pchip {
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self, NumError> {
        if xs.len() != ys.len() {
            return Err(NumError::Invalid(format!("pchip needs equal lengths, got {} and {}", xs.len(), ys.len())));
        }
        if xs.len() < 2 {
            return Err(NumError::Invalid("pchip needs at least two points".into()));
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(NumError::Invalid("pchip abscissae must be strictly increasing".into()));
        }
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let sec: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut ds = vec![0.0; n];
        for i in 1..n - 1 {
            if sec[i - 1] * sec[i] <= 0.0 {
                ds[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                ds[i] = (w1 + w2) / (w1 / sec[i - 1] + w2 / sec[i]);
            }
        }
        ds[0] = edge_slope(h[0], if n > 2 { h[1] } else { h[0] }, sec[0], if n > 2 { sec[1] } else { sec[0] });
        ds[n - 1] = edge_slope(
            h[n - 2],
            if n > 2 { h[n - 3] } else { h[n - 2] },
            sec[n - 2],
            if n > 2 { sec[n - 3] } else { sec[n - 2] },
        );
        Ok(Pchip { xs: xs.to_vec(), ys: ys.to_vec(), ds })
    }

    /// Evaluates at `x`; outside the data range the end cubic is extended.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => return self.ys[i],
            Err(0) => 0,
            Err(i) if i >= n => n - 2,
            Err(i) => i - 1,
        };
        hermite(self.xs[i], self.xs[i + 1], self.ys[i], self.ys[i + 1], self.ds[i], self.ds[i + 1], x)
    }
}

/// Three-point endpoint slope with the standard monotonicity clamp.
fn edge_slope(h0: f64, h1: f64, s0: f64, s1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
    if d * s0 <= 0.0 {
        0.0
    } else if s0 * s1 < 0.0 && d.abs() > 3.0 * s0.abs() {
        3.0 * s0
    } else {
        d
    }
}

/// Cubic Hermite basis evaluation on [x0, x1].
pub fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    y0 * (2.0 * t3 - 3.0 * t2 + 1.0)
        + d0 * h * (t3 - 2.0 * t2 + t)
        + y1 * (-2.0 * t3 + 3.0 * t2)
        + d1 * h * (t3 - t2)
}

/// Cumulative integral of samples on a uniform grid via composite Simpson.
///
/// `f` holds integrand samples at x0 + i*dx; returns S with S[0] = 0 and
/// S[i] = integral up to node i. Odd-index nodes use the half-interval
/// closed Simpson formula (dx/12)(5 f_i + 8 f_{i+1} - f_{i+2}), so every
/// prefix is fourth-order accurate.
pub fn cumulative_uniform(dx: f64, f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut s = vec![0.0; n];
    if n < 2 {
        return s;
    }
    if n == 2 {
        s[1] = 0.5 * dx * (f[0] + f[1]);
        return s;
    }
    for i in 1..n {
        if i % 2 == 0 {
            s[i] = s[i - 2] + dx / 3.0 * (f[i - 2] + 4.0 * f[i - 1] + f[i]);
        } else if i + 1 < n {
            s[i] = s[i - 1] + dx / 12.0 * (5.0 * f[i - 1] + 8.0 * f[i] - f[i + 1]);
        } else {
            // Final node with odd index: backward quadratic over the last interval.
            s[i] = s[i - 1] + dx / 12.0 * (-f[i - 2] + 8.0 * f[i - 1] + 5.0 * f[i]);
        }
    }
    s
}

/// Interpolates a cumulative table built by `cumulative_uniform` at `x`,
/// using the exact integrand samples as Hermite derivatives.
pub fn cumulative_eval(x0: f64, dx: f64, s: &[f64], f: &[f64], x: f64) -> f64 {
    let n = s.len();
    debug_assert!(n >= 2);
    let pos = (x - x0) / dx;
    let i = (pos.floor() as isize).clamp(0, n as isize - 2) as usize;
    let xi = x0 + i as f64 * dx;
    hermite(xi, xi + dx, s[i], s[i + 1], f[i], f[i + 1], x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_matches_closed_form_exponential() {
        let n = 257;
        let dx = 2.0 / (n - 1) as f64;
        let f: Vec<f64> = (0..n).map(|i| (-0.7 * (i as f64) * dx).exp()).collect();
        let s = cumulative_uniform(dx, &f);
        for i in 0..n {
            let x = i as f64 * dx;
            let exact = (1.0 - (-0.7 * x).exp()) / 0.7;
            assert!((s[i] - exact).abs() < 1e-9, "node {i}: {} vs {exact}", s[i]);
        }
        // Off-node query through the Hermite evaluator.
        let q = cumulative_eval(0.0, dx, &s, &f, 1.2345);
        let exact = (1.0 - (-0.7f64 * 1.2345).exp()) / 0.7;
        assert!((q - exact).abs() < 1e-9);
    }

    #[test]
    fn pchip_preserves_monotone_data() {
        let xs = [0.0, 1.0, 2.0, 3.5, 5.0];
        let ys = [0.0, 0.1, 0.9, 0.95, 2.0];
        let p = Pchip::new(&xs, &ys).unwrap();
        let mut prev = p.eval(0.0);
        for k in 1..=500 {
            let x = 5.0 * k as f64 / 500.0;
            let v = p.eval(x);
            assert!(v >= prev - 1e-12, "pchip lost monotonicity at {x}");
            prev = v;
        }
        for (x, y) in xs.iter().zip(ys.iter()) {
            assert_eq!(p.eval(*x), *y);
        }
    }

    #[test]
    fn brent_and_bisection_agree() {
        let f = |x: f64| x * x * x - x - 2.0;
        let spec = BracketSpec { lo: 1.0, hi: 2.0, tol: 1e-12, max_iter: 200 };
        let a = find_root(f, &spec, RootMethod::Bisection).unwrap();
        let b = find_root(f, &spec, RootMethod::Brent).unwrap();
        assert!((a - b).abs() < 1e-10);
    }
}
