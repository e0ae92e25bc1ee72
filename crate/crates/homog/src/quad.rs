//! Adaptive Simpson quadrature on finite intervals.
//!
//! Marginal laws expose analytic survival functions, so every moment integral
//! used in the workbench can be truncated to a finite window by inverting the
//! tail; only a finite-interval rule is needed. Error control is the standard
//! Richardson estimate |S2 - S1|/15 against a per-subinterval tolerance share.

const MAX_DEPTH: u32 = 52;

/// Adaptive Simpson integral of `f` over [a, b] with mixed tolerance
/// `tol * (1 + |integral|)`. Panics never; returns an error if the recursion
/// bottoms out without meeting the tolerance (wildly singular integrand).
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    let mut worst: f64 = 0.0;
    let v = adapt(f, a, b, fa, fm, fb, whole, tol.max(1e-15), MAX_DEPTH, &mut worst);
    if worst > tol.max(1e-15) * 100.0 {
        Err(QuadError::NotConverged { estimate: v, residual: worst })
    } else {
        Ok(v)
    }
}

/// Integral over [points[0], points.last()] split at interior breakpoints
/// (kinks, atoms of piecewise definitions). Points must be sorted.
pub fn integrate_split<F: Fn(f64) -> f64>(
    f: &F,
    points: &[f64],
    tol: f64,
) -> Result<f64, QuadError> {
    let mut total = 0.0;
    for w in points.windows(2) {
        total += integrate(f, w[0], w[1], tol)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum QuadError {
    #[error("quadrature did not converge (estimate {estimate}, residual {residual})")]
    NotConverged { estimate: f64, residual: f64 },
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adapt<F: Fn(f64) -> f64>(
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
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let err = (left + right - whole) / 15.0;
    let scale = 1.0 + (left + right).abs();
    if err.abs() <= tol * scale || depth == 0 {
        if depth == 0 {
            *worst = worst.max(err.abs() / scale);
        }
        return left + right + err;
    }
    adapt(f, a, m, fa, flm, fm, left, tol * 0.5, depth - 1, worst)
        + adapt(f, m, b, fm, frm, fb, right, tol * 0.5, depth - 1, worst)
}
