//! Normalized Lebesgue/Sobolev norms on grid functions and the functional
//! inequality diagnostics built on top of them: multiscale Poincare sums,
//! the interior Caccioppoli ratio, the moment bound for maxima of i.i.d.
//! draws, and a higher-integrability probe for gradients.
//!
//! All norms are volume-normalized: the L2 norm is the square root of the
//! mean of u^2, and the H1 norm of u on U is |U|^(-1/d) ||u||_L2 + ||grad
//! u||_L2 (a sum of seminorms). Negative norms are computed against the
//! Hilbertian surrogate ||v||_H = (|U|^(-2/d) ||v||_L2^2 + ||grad
//! v||_L2^2)^(1/2), which brackets the sum-form norm within a factor
//! sqrt(2); the surrogate admits an exact Riesz solve, the sum form does
//! not. Every assertion that compares negative norms uses the surrogate
//! consistently on both sides.

use crate::cell::{CellError, CellProblem};
use crate::field::{CheckerboardField, FieldError, MarginalLaw};
use crate::grid::{
    assemble_h1_riesz, assemble_mass, element_grad_integrals, element_grad_sq_integrals,
    element_integrals, grad_component_load, grad_sq_integral, integral, l2_inner,
    solve_dirichlet_nodal, BoxDomain, Grid, GridError, GridFn,
};
use crate::sparse::{pcg, SolveError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NormError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("dual norm solve failed: {0}")]
    Solve(#[from] SolveError),
    #[error("input is not discretely a-harmonic: interior residual {0:.3e}")]
    NonHarmonic(f64),
    #[error("moment bound violated: lhs {lhs:.6e} > rhs {rhs:.6e} + 3 se ({stderr:.3e})")]
    MomentBound { lhs: f64, rhs: f64, stderr: f64 },
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// sqrt of the mean of u^2.
    L2Normalized,
    /// |U|^(-1/d) ||u||_L2 + ||grad u||_L2.
    H1Normalized,
    /// Dual norm over zero-trace test functions (surrogate H1 ball).
    Hminus1Underline,
    /// Dual norm over unconstrained test functions (surrogate H1 ball).
    Hminus1Hat,
}

/// Normalized norm of a grid function. Dual kinds solve the Riesz problem
/// for the surrogate inner product; see the module docs.
pub fn norm(u: &GridFn, kind: NormKind) -> Result<f64, NormError> {
    let grid = &u.grid;
    let vol = grid.volume();
    match kind {
        NormKind::L2Normalized => Ok((l2_inner(grid, &u.values, &u.values) / vol).max(0.0).sqrt()),
        NormKind::H1Normalized => {
            let l2 = (l2_inner(grid, &u.values, &u.values) / vol).max(0.0).sqrt();
            let gr = (grad_sq_integral(grid, &u.values) / vol).max(0.0).sqrt();
            Ok(vol.powf(-1.0 / grid.dim as f64) * l2 + gr)
        }
        NormKind::Hminus1Underline | NormKind::Hminus1Hat => {
            let load = assemble_mass(grid).apply(&u.values);
            dual_norm_of_load(grid, &load, kind)
        }
    }
}

/// Dual norm of the linear functional v -> |U|^(-1) load . v, i.e. of the
/// distribution whose pairing against the nodal basis is `load[j]` =
/// integral of (distribution * phi_j). This is the entry point for
/// elementwise data such as flux residuals that are not nodal functions.
pub fn dual_norm_of_load(grid: &Grid, load: &[f64], kind: NormKind) -> Result<f64, NormError> {
    dual_norm_of_loads(grid, std::slice::from_ref(&load.to_vec()), kind)
}

/// Combined dual norm sqrt(sum_i ||load_i||^2) of several functionals on one
/// grid; the Riesz matrix is assembled once.
pub fn dual_norm_of_loads(grid: &Grid, loads: &[Vec<f64>], kind: NormKind) -> Result<f64, NormError> {
    let keep: Option<Vec<usize>> = match kind {
        NormKind::Hminus1Underline => Some(grid.interior_nodes()),
        NormKind::Hminus1Hat => None,
        _ => {
            return Err(NormError::Mismatch(format!(
                "dual_norm_of_loads expects a dual norm kind, got {kind:?}"
            )))
        }
    };
    let b = assemble_h1_riesz(grid);
    let (b, project): (_, Box<dyn Fn(&[f64]) -> Vec<f64>>) = match &keep {
        Some(idx) => {
            let idx = idx.clone();
            (b.submatrix(&idx), Box::new(move |g: &[f64]| idx.iter().map(|&i| g[i]).collect()))
        }
        None => (b, Box::new(|g: &[f64]| g.to_vec())),
    };
    let vol = grid.volume();
    let mut sq = 0.0;
    for load in loads {
        assert_eq!(load.len(), grid.node_count());
        let g = project(load);
        let (w, _) = pcg(&b, &g)?;
        let val: f64 = g.iter().zip(&w).map(|(a, b)| a * b).sum();
        sq += val.max(0.0) / vol;
    }
    Ok(sq.sqrt())
}

/// Multiscale average sum sum_{m=0}^{n-1} 3^m (3^{-(n-m)d} sum_y |avg of u
/// over the block y of side 3^m|^2)^(1/2), where the blocks at level m tile
/// the side-3^n grid. Exact triadic block averages from per-element
/// integrals.
pub fn multiscale_sum(u: &GridFn, n: u32) -> Result<f64, NormError> {
    let per = element_integrals(&u.grid, &u.values);
    multiscale_from_elements(&u.grid, &[per], n)
}

/// Gradient version: the block averages are the d-vector averages of grad u
/// and |.| is the euclidean norm.
pub fn multiscale_sum_gradient(u: &GridFn, n: u32) -> Result<f64, NormError> {
    let comps: Vec<Vec<f64>> = (0..u.grid.dim)
        .map(|a| element_grad_integrals(&u.grid, &u.values, a))
        .collect();
    multiscale_from_elements(&u.grid, &comps, n)
}

fn multiscale_from_elements(grid: &Grid, comps: &[Vec<f64>], n: u32) -> Result<f64, NormError> {
    let side = 3usize.pow(n);
    for axis in 0..grid.dim {
        if grid.elems[axis] != grid.res * side {
            return Err(NormError::Mismatch(format!(
                "grid spans {} elements on axis {axis}, expected a side-3^{n} cube ({})",
                grid.elems[axis],
                grid.res * side
            )));
        }
    }
    let mut total = 0.0;
    for m in 0..n {
        let s = grid.res * 3usize.pow(m);
        let bpa = 3usize.pow(n - m);
        let nblocks = bpa.pow(grid.dim as u32);
        let mut sums = vec![vec![0.0; comps.len()]; nblocks];
        for f in 0..grid.element_count() {
            let e = grid.elem_unflat(f);
            let mut b = 0usize;
            for i in 0..grid.dim {
                b = b * bpa + e[i] / s;
            }
            for (k, comp) in comps.iter().enumerate() {
                sums[b][k] += comp[f];
            }
        }
        let block_vol = 3f64.powi((m as i32) * grid.dim as i32);
        let mean_sq: f64 = sums
            .iter()
            .map(|v| v.iter().map(|x| (x / block_vol) * (x / block_vol)).sum::<f64>())
            .sum::<f64>()
            / nblocks as f64;
        total += 3f64.powi(m as i32) * mean_sq.sqrt();
    }
    Ok(total)
}

fn ratio_guard(num: f64, den: f64) -> f64 {
    if den <= 1e-14 * (1.0 + num) {
        0.0
    } else {
        num / den
    }
}

/// Ratios measuring the multiscale Poincare inequality in three shapes.
#[derive(Debug, Clone)]
pub struct MpiReport {
    /// ||u||_(H^-1 hat) over ||u||_L2 + multiscale_sum(u).
    pub scalar_ratio: f64,
    /// ||u - mean||_L2 over ||grad u||_L2 + multiscale_sum_gradient(u).
    pub gradient_h1_ratio: f64,
    /// ||u||_L2 over the same gradient denominator; only for zero-trace u.
    pub gradient_h10_ratio: Option<f64>,
    pub dual_norm: f64,
    pub l2_norm: f64,
    pub msum: f64,
    /// Componentwise combined dual norm of grad u (intermediate quantity).
    pub grad_dual_norm: f64,
}

/// Evaluate the multiscale Poincare ratios for u on a side-3^n cube grid.
/// Ratios of 0/0 are reported as 0.
pub fn check_mpi(u: &GridFn, n: u32) -> Result<MpiReport, NormError> {
    let grid = &u.grid;
    let vol = grid.volume();
    let dual = norm(u, NormKind::Hminus1Hat)?;
    let l2 = norm(u, NormKind::L2Normalized)?;
    let ms = multiscale_sum(u, n)?;
    let scalar_ratio = ratio_guard(dual, l2 + ms);

    let mean = integral(grid, &u.values) / vol;
    let dev_l2 =
        ((l2_inner(grid, &u.values, &u.values) - vol * mean * mean).max(0.0) / vol).sqrt();
    let grad_l2 = (grad_sq_integral(grid, &u.values) / vol).max(0.0).sqrt();
    let msg = multiscale_sum_gradient(u, n)?;
    let gradient_h1_ratio = ratio_guard(dev_l2, grad_l2 + msg);

    let amp = u.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let zero_trace = grid
        .boundary_nodes()
        .iter()
        .all(|&f| u.values[f].abs() <= 1e-12 * (1.0 + amp));
    let gradient_h10_ratio = zero_trace.then(|| ratio_guard(l2, grad_l2 + msg));

    let grad_loads: Vec<Vec<f64>> =
        (0..grid.dim).map(|a| grad_component_load(grid, &u.values, a)).collect();
    let grad_dual_norm = dual_norm_of_loads(grid, &grad_loads, NormKind::Hminus1Hat)?;

    Ok(MpiReport {
        scalar_ratio,
        gradient_h1_ratio,
        gradient_h10_ratio,
        dual_norm: dual,
        l2_norm: l2,
        msum: ms,
        grad_dual_norm,
    })
}

#[derive(Debug, Clone)]
pub struct CaccioppoliCheck {
    /// ||grad u||_L2(inner box) * r * lam / (Lam * ||u - mean||_L2(outer)).
    pub ratio: f64,
    /// Relative interior residual of the discrete equation.
    pub residual: f64,
    pub lam: f64,
    pub big_lam: f64,
    pub grad_norm: f64,
    pub dev_norm: f64,
}

/// Caccioppoli ratio for a discretely a-harmonic u on the box (-3r, 3r)^d
/// with inner box (-r, r)^d, r = r_num / r_den. The input must satisfy the
/// interior equation to relative residual 1e-6 or the check refuses it.
pub fn check_caccioppoli(
    field: &CheckerboardField,
    r_num: i64,
    r_den: i64,
    u: &GridFn,
) -> Result<CaccioppoliCheck, NormError> {
    if r_num <= 0 || r_den <= 0 {
        return Err(NormError::Mismatch(format!("radius {r_num}/{r_den} must be positive")));
    }
    let domain = BoxDomain::centered(u.grid.dim, 3 * r_num, r_den)?;
    let prob = CellProblem::new(field, domain, u.grid.res)?;
    if prob.grid != u.grid {
        return Err(NormError::Mismatch(
            "input grid does not match the grid over (-3r, 3r)^d".into(),
        ));
    }
    let grid = &u.grid;
    let k = prob.stiffness();
    let kv = k.apply(&u.values);
    let umax = u.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let rowmax = (0..k.n)
        .map(|i| k.vals[k.row_ptr[i]..k.row_ptr[i + 1]].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let scale = rowmax * umax + 1e-300;
    let residual = grid
        .interior_nodes()
        .iter()
        .map(|&i| kv[i].abs())
        .fold(0.0f64, f64::max)
        / scale;
    if residual > 1e-6 {
        return Err(NormError::NonHarmonic(residual));
    }

    let gsq = element_grad_sq_integrals(grid, &u.values);
    let bound = r_num * grid.res as i64 / r_den;
    let mut inner = 0.0;
    for f in 0..grid.element_count() {
        let e = grid.elem_unflat(f);
        let inside = (0..grid.dim).all(|i| {
            let lo = grid.corner[i] + e[i] as i64;
            lo >= -bound && lo + 1 <= bound
        });
        if inside {
            inner += gsq[f];
        }
    }
    let r = r_num as f64 / r_den as f64;
    let grad_norm = (inner / (2.0 * r).powi(grid.dim as i32)).max(0.0).sqrt();
    let vol = grid.volume();
    let mean = integral(grid, &u.values) / vol;
    let dev_norm =
        ((l2_inner(grid, &u.values, &u.values) - vol * mean * mean).max(0.0) / vol).sqrt();
    let ratio = if dev_norm <= 1e-14 * (1.0 + grad_norm) {
        0.0
    } else {
        grad_norm * r * prob.lam / (prob.big_lam * dev_norm)
    };
    Ok(CaccioppoliCheck {
        ratio,
        residual,
        lam: prob.lam,
        big_lam: prob.big_lam,
        grad_norm,
        dev_norm,
    })
}

#[derive(Debug, Clone)]
pub struct MaxMomentCheck {
    /// Monte Carlo estimate of E[max_i |X_i|^p] over `count` i.i.d. draws.
    pub lhs: f64,
    /// 2^(p-1) ((p-1)^p + log(count * E e^|X|)^p).
    pub rhs: f64,
    pub stderr: f64,
    pub exp_moment: f64,
    /// rhs + 3 se - lhs; nonnegative when the bound holds.
    pub margin: f64,
}

/// Check the moment bound for the maximum of `count` i.i.d. |X_i| against
/// the exponential-moment estimate. E e^|X| is computed by quadrature (an
/// error for laws with a divergent exponential moment); the left side by
/// Monte Carlo. Errors out when lhs exceeds rhs + 3 standard errors.
pub fn check_max_moment(
    law: &MarginalLaw,
    count: usize,
    power: f64,
    samples: usize,
    seed: u64,
) -> Result<MaxMomentCheck, NormError> {
    if count == 0 || samples == 0 {
        return Err(NormError::Mismatch("count and samples must be positive".into()));
    }
    if power < 1.0 {
        return Err(NormError::Mismatch(format!("power {power} must be at least 1")));
    }
    law.validate()?;
    let exp_moment = law.exp_moment(1.0)?;
    let rhs = 2f64.powf(power - 1.0)
        * ((power - 1.0).powf(power) + (count as f64 * exp_moment).ln().powf(power));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut top = 0.0f64;
        for _ in 0..count {
            top = top.max(law.draw(&mut rng).abs());
        }
        let v = top.powf(power);
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let lhs = sum / n;
    let var = ((sum_sq / n - lhs * lhs).max(0.0)) * n / (n - 1.0).max(1.0);
    let stderr = (var / n).sqrt();
    let margin = rhs + 3.0 * stderr - lhs;
    if lhs > rhs + 3.0 * stderr + 1e-12 {
        return Err(NormError::MomentBound { lhs, rhs, stderr });
    }
    Ok(MaxMomentCheck { lhs, rhs, stderr, exp_moment, margin })
}

#[derive(Debug, Clone)]
pub struct MeyersProbe {
    pub s_values: Vec<f64>,
    /// ||grad u||_L^s / ||grad f||_L^s per s, u the a-harmonic extension.
    pub ratios: Vec<f64>,
    /// Boundedness cap 2 sqrt(Lam / lam); the s = 2 ratio always sits below
    /// sqrt(Lam / lam) by energy minimality.
    pub cap: f64,
    /// Largest probed s whose ratio stays below the cap.
    pub empirical_exponent: f64,
}

/// Higher-integrability probe: solve the Dirichlet problem with boundary
/// data `data` on a triadic cube and compare L^s norms of the gradients of
/// the solution and the data interpolant for s >= 2. Reported only; no
/// sharp exponent is claimed.
pub fn meyers_probe(
    field: &CheckerboardField,
    cube: &crate::field::TriadicCube,
    res: usize,
    data: &dyn Fn(&[f64]) -> f64,
) -> Result<MeyersProbe, NormError> {
    let prob = CellProblem::from_cube(field, cube, res)?;
    let sol = solve_dirichlet_nodal(&prob.grid, prob.stiffness(), data, None)?;
    let f_interp = GridFn::from_closure(prob.grid.clone(), data);
    let s_values = vec![2.0, 2.25, 2.5, 3.0, 4.0];
    let cap = 2.0 * (prob.big_lam / prob.lam).sqrt();
    let mut ratios = Vec::with_capacity(s_values.len());
    for &s in &s_values {
        let num = gauss_grad_ls(&prob.grid, &sol.values, s);
        let den = gauss_grad_ls(&prob.grid, &f_interp.values, s);
        ratios.push(ratio_guard(num, den));
    }
    let empirical_exponent = s_values
        .iter()
        .zip(&ratios)
        .filter(|(_, &r)| r <= cap)
        .map(|(&s, _)| s)
        .fold(0.0f64, f64::max);
    Ok(MeyersProbe { s_values, ratios, cap, empirical_exponent })
}

/// Normalized L^s norm of |grad u| by 2^d-point Gauss quadrature per
/// element (exact for s = 2).
fn gauss_grad_ls(grid: &Grid, u: &[f64], s: f64) -> f64 {
    let dim = grid.dim;
    let h = grid.h();
    let pts = [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()];
    let w = (h / 2.0).powi(dim as i32);
    let n_local = 1usize << dim;
    let mut acc = 0.0;
    for f in 0..grid.element_count() {
        let e = grid.elem_unflat(f);
        let nodes = grid.element_nodes(&e);
        for g in 0..n_local {
            let xi: Vec<f64> = (0..dim).map(|i| pts[(g >> (dim - 1 - i)) & 1]).collect();
            let mut gsq = 0.0;
            for a in 0..dim {
                let mut da = 0.0;
                for l in 0..n_local {
                    // tensor-product hat: +-1/h slope on `a`, 1-xi or xi elsewhere
                    let mut t = 1.0 / h;
                    for i in 0..dim {
                        let off = (l >> (dim - 1 - i)) & 1;
                        if i == a {
                            t *= if off == 1 { 1.0 } else { -1.0 };
                        } else {
                            t *= if off == 1 { xi[i] } else { 1.0 - xi[i] };
                        }
                    }
                    da += u[nodes[l]] * t;
                }
                gsq += da * da;
            }
            acc += w * gsq.powf(s / 2.0);
        }
    }
    (acc / grid.volume()).powf(1.0 / s)
}
