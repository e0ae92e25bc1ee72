//! Monte Carlo studies of the expectation-level objects: per-scale
//! effective matrices and their standard errors, the additivity defect
//! tau_n, the composite fluctuation quantity Omega(n), truncated moments of
//! the ellipticity extremes against decay profiles, and the empirical
//! convergence-rate study.
//!
//! Every study derives per-sample seeds from (master_seed, index), runs the
//! samples independently (possibly in parallel), and reduces in fixed index
//! order with compensated summation, so results are bit-reproducible across
//! worker counts.

use crate::cell::{matrices_on_cube, CellError};
use crate::field::{sample_seed, CheckerboardField, FieldError, MarginalLaw, TriadicCube};
use crate::matrix::SymMat;
use crate::quad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("sample {index} failed: {source}")]
    Sample { index: usize, source: CellError },
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("study inconsistency: {0}")]
    Inconsistent(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Compensated (Kahan) accumulator; the reduction order is fixed by the
/// caller, this only removes rounding drift within that order.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    pub(crate) fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub(crate) fn value(self) -> f64 {
        self.sum
    }
}

pub(crate) fn mean_of(xs: &[f64]) -> f64 {
    let mut k = Kahan::default();
    for &x in xs {
        k.add(x);
    }
    k.value() / xs.len() as f64
}

/// Standard error of the mean (sample variance over N).
pub(crate) fn se_of(xs: &[f64], mean: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mut k = Kahan::default();
    for &x in xs {
        k.add((x - mean) * (x - mean));
    }
    (k.value() / (xs.len() - 1) as f64 / xs.len() as f64).sqrt()
}

/// Componentwise mean of symmetric matrices.
fn mat_mean(mats: &[SymMat]) -> SymMat {
    let dim = mats[0].dim;
    let mut out = SymMat::zero(dim);
    for i in 0..dim {
        for j in i..dim {
            let xs: Vec<f64> = mats.iter().map(|m| m.get(i, j)).collect();
            out.set(i, j, mean_of(&xs));
        }
    }
    out
}

/// Componentwise standard errors, packed in a SymMat-shaped container.
fn mat_se(mats: &[SymMat], mean: &SymMat) -> SymMat {
    let dim = mats[0].dim;
    let mut out = SymMat::zero(dim);
    for i in 0..dim {
        for j in i..dim {
            let xs: Vec<f64> = mats.iter().map(|m| m.get(i, j)).collect();
            out.set(i, j, se_of(&xs, mean.get(i, j)));
        }
    }
    out
}

fn max_entry(m: &SymMat) -> f64 {
    m.flat_entries().iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Per-scale Monte Carlo study of the effective matrices.
#[derive(Debug, Clone, Serialize)]
pub struct ScaleStudy {
    pub law: MarginalLaw,
    pub dim: usize,
    pub n: u32,
    pub samples: usize,
    pub res: usize,
    pub master_seed: u64,
    /// Mean of the Dirichlet-form matrix a(box_n) over samples.
    pub mean_a: SymMat,
    /// Componentwise standard errors of mean_a.
    pub se_a: SymMat,
    /// Mean of the dual-form inverse matrix over samples.
    pub mean_astar_inv: SymMat,
    pub se_astar_inv: SymMat,
    /// (mean_astar_inv)^-1, the per-scale effective matrix estimate.
    pub abar_n: SymMat,
    pub mean_big_lam: f64,
    pub mean_lam_inv: f64,
    pub omega_mean: Option<f64>,
    pub omega_se: Option<f64>,
    /// Wall-clock only; excluded from reproducibility promises and kept
    /// out of the serialized results (the CLI reports wall time separately).
    #[serde(skip)]
    pub wall_ms: u128,
    #[serde(skip)]
    pub a_samples: Vec<SymMat>,
    #[serde(skip)]
    pub astar_inv_samples: Vec<SymMat>,
}

/// Run N independent samples of the scale-n cell problems and aggregate.
/// Studies at different scales with the same master seed share cell values
/// on overlapping cells (seeds are keyed by absolute cell coordinates), so
/// consecutive scales are coupled for variance reduction in differences.
pub fn run_scale_study(
    law: &MarginalLaw,
    dim: usize,
    n: u32,
    samples: usize,
    res: usize,
    master_seed: u64,
) -> Result<ScaleStudy, StatsError> {
    if samples < 2 {
        return Err(StatsError::Inconsistent(format!(
            "a study needs at least 2 samples, got {samples}"
        )));
    }
    let t0 = Instant::now();
    let cube = TriadicCube::centered(n, dim);
    let rows: Vec<(SymMat, SymMat, f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let field = CheckerboardField::sample(
                law.clone(),
                dim,
                sample_seed(master_seed, i as u64),
                cube.clone(),
            )
            .map_err(|e| StatsError::Sample { index: i, source: e.into() })?;
            let rep = matrices_on_cube(&field, &cube, res)
                .map_err(|e| StatsError::Sample { index: i, source: e })?;
            Ok((rep.a.clone(), rep.a_star.inverse(), rep.big_lam, 1.0 / rep.lam))
        })
        .collect::<Result<_, StatsError>>()?;

    let a_samples: Vec<SymMat> = rows.iter().map(|r| r.0.clone()).collect();
    let astar_inv_samples: Vec<SymMat> = rows.iter().map(|r| r.1.clone()).collect();
    let big_lams: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let lam_invs: Vec<f64> = rows.iter().map(|r| r.3).collect();

    let mean_a = mat_mean(&a_samples);
    let se_a = mat_se(&a_samples, &mean_a);
    let mean_astar_inv = mat_mean(&astar_inv_samples);
    let se_astar_inv = mat_se(&astar_inv_samples, &mean_astar_inv);
    if mean_astar_inv.min_eigenvalue() <= 0.0 {
        return Err(StatsError::Inconsistent(
            "mean dual-form inverse is not positive definite".into(),
        ));
    }
    let abar_n = mean_astar_inv.inverse();
    if abar_n.min_eigenvalue() <= 0.0 {
        return Err(StatsError::Inconsistent("abar_n is not positive definite".into()));
    }

    Ok(ScaleStudy {
        law: law.clone(),
        dim,
        n,
        samples,
        res,
        master_seed,
        mean_a,
        se_a,
        mean_astar_inv,
        se_astar_inv,
        abar_n,
        mean_big_lam: mean_of(&big_lams),
        mean_lam_inv: mean_of(&lam_invs),
        omega_mean: None,
        omega_se: None,
        wall_ms: t0.elapsed().as_millis(),
        a_samples,
        astar_inv_samples,
    })
}

/// Recreate the study's fields (same seeds) and attach the per-sample
/// Omega(n) statistics measured against `abar_ref`.
pub fn attach_omega(study: &mut ScaleStudy, abar_ref: &SymMat) -> Result<(), StatsError> {
    let cube = TriadicCube::centered(study.n, study.dim);
    let omegas: Vec<f64> = (0..study.samples)
        .into_par_iter()
        .map(|i| {
            let field = CheckerboardField::sample(
                study.law.clone(),
                study.dim,
                sample_seed(study.master_seed, i as u64),
                cube.clone(),
            )
            .map_err(|e| StatsError::Sample { index: i, source: e.into() })?;
            compute_omega(&field, &cube, study.res, abar_ref)
        })
        .collect::<Result<_, StatsError>>()?;
    let mean = mean_of(&omegas);
    study.omega_se = Some(se_of(&omegas, mean));
    study.omega_mean = Some(mean);
    Ok(())
}

/// Effective matrix for one subcube; scale-0 cubes are a single cell where
/// the constant-coefficient problem is solved by affine functions exactly,
/// so the matrix is the cell coefficient itself.
fn subcube_matrix(
    field: &CheckerboardField,
    cube: &TriadicCube,
    res: usize,
) -> Result<SymMat, CellError> {
    if cube.scale == 0 {
        Ok(field.coeff_at_cell(&cube.offset)?)
    } else {
        Ok(matrices_on_cube(field, cube, res)?.a)
    }
}

/// The per-level contributions to Omega(n): term_m = 3^(-(n-m)) *
/// (3^(-(n-m)d) * sum over the scale-m subcubes of |a(subcube) -
/// abar_ref|)^(1/2), for m = 0..n. Omega is the square of their sum.
pub fn omega_terms(
    field: &CheckerboardField,
    cube: &TriadicCube,
    res: usize,
    abar_ref: &SymMat,
) -> Result<Vec<f64>, StatsError> {
    if abar_ref.min_eigenvalue() <= 0.0 {
        return Err(StatsError::Inconsistent("abar_ref must be positive definite".into()));
    }
    let n = cube.scale;
    let dim = cube.dim() as i32;
    let mut terms = Vec::with_capacity(n as usize + 1);
    for m in 0..=n {
        let mut sum = Kahan::default();
        for sub in cube.children(m) {
            let a = subcube_matrix(field, &sub, res)?;
            sum.add(a.sub(abar_ref).op_norm());
        }
        let k = (n - m) as i32;
        let inner = 3f64.powi(-k * dim) * sum.value();
        terms.push(3f64.powi(-k) * inner.max(0.0).sqrt());
    }
    Ok(terms)
}

/// Omega(n) = (sum_m 3^(-(n-m)) (3^(-(n-m)d) sum_z |a(z + box_m) -
/// abar_ref|)^(1/2))^2, the squared weighted sum over all triadic
/// subdivision levels of the normalized matrix fluctuations.
pub fn compute_omega(
    field: &CheckerboardField,
    cube: &TriadicCube,
    res: usize,
    abar_ref: &SymMat,
) -> Result<f64, StatsError> {
    let terms = omega_terms(field, cube, res, abar_ref)?;
    let mut total = Kahan::default();
    for t in terms {
        total.add(t);
    }
    Ok(total.value() * total.value())
}

#[derive(Debug, Clone, Serialize)]
pub struct TauEstimate {
    /// Scale of the coarser study.
    pub n: u32,
    /// Half top-eigenvalue of each mean difference, clamped at 0, summed.
    pub value: f64,
    /// Raw top eigenvalue of mean a(box_n) - mean a(box_{n+1}).
    pub mu_eig: f64,
    /// Raw top eigenvalue of the dual-form inverse mean difference.
    pub mu_star_eig: f64,
    pub mu_clamped: bool,
    pub mu_star_clamped: bool,
    /// Same master seed and res: the studies share cell draws.
    pub coupled: bool,
    /// Largest componentwise standard error feeding the difference.
    pub noise_scale: f64,
}

/// Additivity defect between consecutive scales. The defining supremum over
/// the unit ball of a difference of quadratic forms equals half the top
/// eigenvalue of the coefficient difference, computed here on the sample
/// means; subadditivity makes both differences PSD in expectation, so
/// negative eigenvalues (statistical noise) are clamped and reported.
pub fn estimate_tau(at_n: &ScaleStudy, at_n1: &ScaleStudy) -> Result<TauEstimate, StatsError> {
    if at_n1.n != at_n.n + 1 || at_n1.dim != at_n.dim || at_n1.law != at_n.law {
        return Err(StatsError::Inconsistent(format!(
            "tau needs consecutive scales of one law, got n = {} and n = {}",
            at_n.n, at_n1.n
        )));
    }
    let mu_eig = at_n.mean_a.sub(&at_n1.mean_a).max_eigenvalue();
    let mu_star_eig = at_n.mean_astar_inv.sub(&at_n1.mean_astar_inv).max_eigenvalue();
    let value = 0.5 * mu_eig.max(0.0) + 0.5 * mu_star_eig.max(0.0);
    let noise_scale = max_entry(&at_n.se_a)
        .max(max_entry(&at_n1.se_a))
        .max(max_entry(&at_n.se_astar_inv))
        .max(max_entry(&at_n1.se_astar_inv));
    Ok(TauEstimate {
        n: at_n.n,
        value,
        mu_eig,
        mu_star_eig,
        mu_clamped: mu_eig < 0.0,
        mu_star_clamped: mu_star_eig < 0.0,
        coupled: at_n.master_seed == at_n1.master_seed && at_n.res == at_n1.res,
        noise_scale,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AbarEstimate {
    /// Mean Dirichlet-form matrix at the largest scale (the polarization of
    /// twice the mean quadratic minimum).
    pub value: SymMat,
    /// Harmonic-mean lower bound (E[lambda(box_0)^-1])^-1.
    pub bracket_lo: f64,
    /// Arithmetic upper bound E[Lambda(box_0)].
    pub bracket_hi: f64,
    /// Spatial-average refinement; coincides with the coarse bracket for
    /// scalar cells, where eigenvalues equal entries.
    pub refined_lo: f64,
    pub refined_hi: f64,
    /// 3 * largest componentwise standard error at the largest scale.
    pub slack: f64,
}

/// Estimate the limiting effective matrix from a ladder of studies and
/// check it against the law's closed-form brackets.
pub fn estimate_abar(studies: &[ScaleStudy]) -> Result<AbarEstimate, StatsError> {
    let last = validate_ladder(studies)?;
    let value = last.mean_a.clone();
    let lo = 1.0 / last.law.mean_reciprocal()?;
    let hi = last.law.mean()?;
    // statistical slack plus a solver-tolerance floor: atomic laws can have
    // zero standard error while the matrices carry iterative-solve noise
    let slack = 3.0 * max_entry(&last.se_a) + 1e-8 * (1.0 + hi.abs());
    if value.min_eigenvalue() < lo - slack || value.max_eigenvalue() > hi + slack {
        return Err(StatsError::Inconsistent(format!(
            "abar estimate with eigenvalues [{:.6}, {:.6}] leaves the bracket [{lo:.6}, {hi:.6}] \
             by more than the slack {slack:.2e}",
            value.min_eigenvalue(),
            value.max_eigenvalue()
        )));
    }
    Ok(AbarEstimate { value, bracket_lo: lo, bracket_hi: hi, refined_lo: lo, refined_hi: hi, slack })
}

fn validate_ladder(studies: &[ScaleStudy]) -> Result<&ScaleStudy, StatsError> {
    let first = studies
        .first()
        .ok_or_else(|| StatsError::Inconsistent("no studies given".into()))?;
    for w in studies.windows(2) {
        if w[1].n != w[0].n + 1 {
            return Err(StatsError::Inconsistent("study scales must ascend by 1".into()));
        }
        if w[1].law != first.law || w[1].dim != first.dim || w[1].res != first.res {
            return Err(StatsError::Inconsistent(
                "studies must share the law, dimension and resolution".into(),
            ));
        }
    }
    Ok(studies.last().unwrap())
}

#[derive(Debug, Clone, Serialize)]
pub struct RateRow {
    pub n: u32,
    /// Mean of |a(box_n) - abar_ref|^2 (operator norm) over samples.
    pub err_sq: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitLine {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

fn fit_line(xs: &[f64], ys: &[f64]) -> FitLine {
    let n = xs.len() as f64;
    let mx = mean_of(xs);
    let my = mean_of(ys);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res = syy - slope * sxy;
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let _ = n;
    FitLine { slope, intercept, r_squared }
}

#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub abar_ref: SymMat,
    pub oracle_used: bool,
    /// Rate exponent implied by the law's tail exponents.
    pub alpha: f64,
    pub rows: Vec<RateRow>,
    /// Errors decrease with n up to 2 combined standard errors.
    pub monotone: bool,
    pub violations: Vec<String>,
    /// log err against n^(1-3 alpha).
    pub fit_stretched: Option<FitLine>,
    /// log err against n; reported alongside without adjudicating the
    /// functional form (indistinguishable at these scales).
    pub fit_exponential: Option<FitLine>,
    #[serde(skip)]
    pub studies: Vec<ScaleStudy>,
}

/// Convergence-rate study: per-scale squared-error estimates against the
/// law's closed-form effective matrix when one exists, otherwise against
/// the largest-scale sample mean.
pub fn convergence_study(
    law: &MarginalLaw,
    dim: usize,
    scales: &[u32],
    samples: usize,
    res: usize,
    master_seed: u64,
) -> Result<RateReport, StatsError> {
    if samples < 30 {
        return Err(StatsError::Inconsistent(format!(
            "a rate study needs at least 30 samples, got {samples}"
        )));
    }
    if scales.is_empty() || scales.windows(2).any(|w| w[1] <= w[0]) {
        return Err(StatsError::Inconsistent("scales must be strictly ascending".into()));
    }
    let studies: Vec<ScaleStudy> = scales
        .iter()
        .map(|&n| run_scale_study(law, dim, n, samples, res, master_seed))
        .collect::<Result<_, _>>()?;
    let oracle = law.closed_form_effective(dim);
    let oracle_used = oracle.is_some();
    let abar_ref = oracle.unwrap_or_else(|| studies.last().unwrap().mean_a.clone());

    let mut rows = Vec::with_capacity(studies.len());
    for st in &studies {
        let errs: Vec<f64> = st
            .a_samples
            .iter()
            .map(|a| {
                let d = a.sub(&abar_ref).op_norm();
                d * d
            })
            .collect();
        let err_sq = mean_of(&errs);
        rows.push(RateRow { n: st.n, err_sq, stderr: se_of(&errs, err_sq) });
    }

    let mut violations = Vec::new();
    for w in rows.windows(2) {
        let slack = 2.0 * (w[0].stderr * w[0].stderr + w[1].stderr * w[1].stderr).sqrt();
        if w[1].err_sq > w[0].err_sq + slack {
            violations.push(format!(
                "error grew from {:.3e} (n = {}) to {:.3e} (n = {}) beyond slack {:.3e}",
                w[0].err_sq, w[0].n, w[1].err_sq, w[1].n, slack
            ));
        }
    }

    let alpha = law.implied_alpha();
    let usable: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.err_sq > 1e-28)
        .map(|r| (r.n as f64, r.err_sq.ln()))
        .collect();
    let (fit_stretched, fit_exponential) = if usable.len() >= 2 {
        let ys: Vec<f64> = usable.iter().map(|p| p.1).collect();
        let xs_st: Vec<f64> = usable.iter().map(|p| p.0.powf(1.0 - 3.0 * alpha)).collect();
        let xs_ex: Vec<f64> = usable.iter().map(|p| p.0).collect();
        (Some(fit_line(&xs_st, &ys)), Some(fit_line(&xs_ex, &ys)))
    } else {
        (None, None)
    };

    Ok(RateReport {
        abar_ref,
        oracle_used,
        alpha,
        monotone: violations.is_empty(),
        violations,
        rows,
        fit_stretched,
        fit_exponential,
        studies,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    pub mu_ok: bool,
    pub mu_star_ok: bool,
    pub j_ok: bool,
    pub violations: Vec<String>,
}

fn probe_dirs(dim: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        vec![vec![1.0]]
    } else {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s]]
    }
}

/// Mean quadratic minima/maxima are non-increasing in the scale; checked
/// per probe direction with a 2-standard-error slack. The dual pairing
/// probe uses q = p.
pub fn check_monotonicity(studies: &[ScaleStudy]) -> Result<MonotonicityReport, StatsError> {
    validate_ladder(studies)?;
    let dim = studies[0].dim;
    let mut violations = Vec::new();
    let mut mu_ok = true;
    let mut mu_star_ok = true;
    let mut j_ok = true;
    for p in probe_dirs(dim) {
        let mut series = |name: &str, f: &dyn Fn(&ScaleStudy, usize) -> f64, ok: &mut bool| {
            let mut prev: Option<(u32, f64, f64)> = None;
            for st in studies {
                let vals: Vec<f64> = (0..st.samples).map(|i| f(st, i)).collect();
                let mean = mean_of(&vals);
                let se = se_of(&vals, mean);
                if let Some((pn, pm, pse)) = prev {
                    let slack = 2.0 * (pse * pse + se * se).sqrt();
                    if mean > pm + slack {
                        *ok = false;
                        violations.push(format!(
                            "{name} at p = {p:?} grew from {pm:.6} (n = {pn}) to {mean:.6} \
                             (n = {}) beyond slack {slack:.2e}",
                            st.n
                        ));
                    }
                }
                prev = Some((st.n, mean, se));
            }
        };
        series("mu", &|st, i| 0.5 * st.a_samples[i].quad_form(&p), &mut mu_ok);
        series("mu_star", &|st, i| 0.5 * st.astar_inv_samples[i].quad_form(&p), &mut mu_star_ok);
        let psq: f64 = p.iter().map(|c| c * c).sum();
        series(
            "j",
            &|st, i| {
                0.5 * st.a_samples[i].quad_form(&p) + 0.5 * st.astar_inv_samples[i].quad_form(&p)
                    - psq
            },
            &mut j_ok,
        );
    }
    Ok(MonotonicityReport { mu_ok, mu_star_ok, j_ok, violations })
}

/// Decay-profile check for the truncated moments E[lambda^-3 + Lambda^3 ;
/// bad event] with delta_n = (n+1)^(-gamma') and M_n = (n+1)^(beta').
#[derive(Debug, Clone, Serialize)]
pub struct SuppressiveRow {
    pub n: u32,
    pub delta: f64,
    pub cap: f64,
    /// E[lambda^-3 + Lambda^3; lambda <= delta or Lambda >= cap].
    pub moment_bad: f64,
    /// Unconditional E[lambda^-3 + Lambda^3].
    pub moment_total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuppressiveProfile {
    pub beta_prime: f64,
    pub gamma_prime: f64,
    pub dim: usize,
    pub rows: Vec<SuppressiveRow>,
    /// Smallest L with moment_bad(n) <= L e^-n for all computed n.
    pub l_fit: f64,
    /// Whether the fitted L is not driven by the last scale (the decay
    /// trend holds inside the window); vacuously true when all moments (or
    /// all but the first) vanish.
    pub trend_consistent: bool,
}

pub fn suppressive_profile(
    law: &MarginalLaw,
    dim: usize,
    beta_prime: f64,
    gamma_prime: f64,
    n_max: u32,
) -> Result<SuppressiveProfile, StatsError> {
    law.validate()?;
    if beta_prime <= 0.0 || gamma_prime <= 0.0 {
        return Err(StatsError::Inconsistent("profile exponents must be positive".into()));
    }
    let mut rows = Vec::with_capacity(n_max as usize + 1);
    for n in 0..=n_max {
        let delta = ((n + 1) as f64).powf(-gamma_prime);
        let cap = ((n + 1) as f64).powf(beta_prime);
        let cells = 3f64.powi((n as i32) * dim as i32);
        let (moment_bad, moment_total) = truncated_extreme_moment(law, cells, delta, cap)?;
        rows.push(SuppressiveRow { n, delta, cap, moment_bad, moment_total });
    }
    let weighted: Vec<f64> =
        rows.iter().map(|r| r.moment_bad * (r.n as f64).exp()).collect();
    let l_fit = weighted.iter().fold(0.0f64, |a, &v| a.max(v));
    let peak = weighted
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let trend_consistent = l_fit == 0.0 || peak < rows.len() - 1 || rows.len() == 1;
    Ok(SuppressiveProfile { beta_prime, gamma_prime, dim, rows, l_fit, trend_consistent })
}

/// E[g(min, max); bad] and E[g(min, max)] for g = min^-3 + max^3 over
/// `cells` i.i.d. draws, where bad = {min <= delta} or {max >= cap}. Atomic
/// laws are enumerated exactly; continuous laws use adaptive quadrature of
/// the order-statistic densities.
fn truncated_extreme_moment(
    law: &MarginalLaw,
    cells: f64,
    delta: f64,
    cap: f64,
) -> Result<(f64, f64), StatsError> {
    let g = |lam: f64, big: f64| lam.powi(-3) + big.powi(3);
    let is_bad = |lam: f64, big: f64| lam <= delta || big >= cap;
    match *law {
        MarginalLaw::Constant { value } => {
            let total = g(value, value);
            let bad = if is_bad(value, value) { total } else { 0.0 };
            Ok((bad, total))
        }
        MarginalLaw::TwoPoint { lo, hi, p_hi } => {
            // (min, max) takes three values: all-lo, all-hi, mixed
            let q = 1.0 - p_hi;
            let cases = [
                (q.powf(cells), lo, lo),
                (p_hi.powf(cells), hi, hi),
                ((1.0 - q.powf(cells) - p_hi.powf(cells)).max(0.0), lo, hi),
            ];
            let mut bad = 0.0;
            let mut total = 0.0;
            for (prob, lam, big) in cases {
                total += prob * g(lam, big);
                if is_bad(lam, big) {
                    bad += prob * g(lam, big);
                }
            }
            Ok((bad, total))
        }
        _ => {
            let pts = law.breakpoints();
            let (support_lo, support_hi) = (pts[0], *pts.last().unwrap());
            let n1 = cells - 1.0;
            let f = |t: f64| law.pdf(t);
            // unconditional moments of the extremes
            let total_min = integrate_over(
                &|t| t.powi(-3) * cells * (1.0 - law.cdf(t)).powf(n1) * f(t),
                &pts,
            )?;
            let total_max =
                integrate_over(&|t| t.powi(3) * cells * law.cdf(t).powf(n1) * f(t), &pts)?;
            // moments restricted to the good event delta < min, max < cap:
            // joint survival P(min > t, max < cap) = (F(cap) - F(t))^cells
            let a = delta.max(support_lo);
            let b = cap.min(support_hi);
            let (good_min, good_max) = if a < b {
                let f_cap = law.cdf(cap);
                let f_delta = law.cdf(delta);
                let mut inner: Vec<f64> =
                    pts.iter().copied().filter(|&t| t > a && t < b).collect();
                let mut cut = vec![a];
                cut.append(&mut inner);
                cut.push(b);
                let gm = integrate_over(
                    &|t| t.powi(-3) * cells * (f_cap - law.cdf(t)).max(0.0).powf(n1) * f(t),
                    &cut,
                )?;
                let gx = integrate_over(
                    &|t| t.powi(3) * cells * (law.cdf(t) - f_delta).max(0.0).powf(n1) * f(t),
                    &cut,
                )?;
                (gm, gx)
            } else {
                (0.0, 0.0)
            };
            let bad = (total_min - good_min).max(0.0) + (total_max - good_max).max(0.0);
            Ok((bad, total_min + total_max))
        }
    }
}

fn integrate_over<F: Fn(f64) -> f64>(f: &F, pts: &[f64]) -> Result<f64, StatsError> {
    quad::integrate_split(f, pts, 1e-12)
        .map_err(|e| StatsError::Inconsistent(format!("quadrature failed: {e}")))
}

/// Monte Carlo cross-check of one row of the profile: mean and standard
/// error of g(min, max) restricted to the bad event.
pub fn suppressive_mc(
    law: &MarginalLaw,
    dim: usize,
    beta_prime: f64,
    gamma_prime: f64,
    n: u32,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let delta = ((n + 1) as f64).powf(-gamma_prime);
    let cap = ((n + 1) as f64).powf(beta_prime);
    let cells = 3usize.pow(n * dim as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut lam = f64::INFINITY;
        let mut big = f64::NEG_INFINITY;
        for _ in 0..cells {
            let b = law.draw(&mut rng);
            lam = lam.min(b);
            big = big.max(b);
        }
        let v = if lam <= delta || big >= cap { lam.powi(-3) + big.powi(3) } else { 0.0 };
        vals.push(v);
    }
    let mean = mean_of(&vals);
    (mean, se_of(&vals, mean))
}

/// One CSV row per scale: headline matrix entries, their ingredient
/// standard errors, the additivity defect to the next scale, the Omega
/// mean when attached, and wall time (wall time is informational only).
pub fn write_study_csv<W: Write>(mut w: W, studies: &[ScaleStudy]) -> Result<(), StatsError> {
    if studies.is_empty() {
        return Err(StatsError::Inconsistent("no studies to write".into()));
    }
    let dim = studies[0].dim;
    let labels = SymMat::entry_labels(dim);
    let mut header = vec!["n".to_string(), "samples".into(), "res".into()];
    header.extend(labels.iter().map(|l| format!("abar_{l}")));
    header.extend(labels.iter().map(|l| format!("se_astarinv_{l}")));
    header.push("tau".into());
    header.push("omega_mean".into());
    header.push("wall_ms".into());
    writeln!(w, "{}", header.join(","))?;
    for (i, st) in studies.iter().enumerate() {
        let tau = if i + 1 < studies.len() {
            estimate_tau(st, &studies[i + 1]).map(|t| t.value).ok()
        } else {
            None
        };
        let mut row = vec![st.n.to_string(), st.samples.to_string(), st.res.to_string()];
        row.extend(st.abar_n.flat_entries().iter().map(|v| format!("{v:.12e}")));
        row.extend(st.se_astar_inv.flat_entries().iter().map(|v| format!("{v:.12e}")));
        row.push(tau.map_or(String::new(), |t| format!("{t:.12e}")));
        row.push(st.omega_mean.map_or(String::new(), |o| format!("{o:.12e}")));
        row.push(st.wall_ms.to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
