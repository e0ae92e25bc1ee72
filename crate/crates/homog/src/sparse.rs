//! Sparse symmetric linear algebra: CSR storage and diagonally preconditioned
//! conjugate gradients.
//!
//! Two solve modes cover every system in the workbench: plain SPD solves
//! (interior Dirichlet blocks, Riesz maps) and singular consistent solves with
//! the constant nullspace deflated by mean projection (pure flux problems).
//! Iterations are strictly sequential, so results are bit-reproducible.

#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("PCG stalled after {iterations} iterations, relative residual {rel_residual:e}")]
    NotConverged { iterations: usize, rel_residual: f64 },
    #[error("load incompatible with pure flux problem: |sum| = {imbalance:e} exceeds 1e-8 * ||load||")]
    IncompatibleLoad { imbalance: f64 },
    #[error("matrix has a non-positive diagonal entry at row {0}")]
    BadDiagonal(usize),
}

/// Row-wise accumulator; entries within a row are combined in first-append
/// order so assembly is deterministic.
pub struct CsrBuilder {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl CsrBuilder {
    pub fn new(n: usize) -> Self {
        CsrBuilder { n, rows: vec![Vec::new(); n] }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let row = &mut self.rows[i];
        for e in row.iter_mut() {
            if e.0 == j {
                e.1 += v;
                return;
            }
        }
        row.push((j, v));
    }

    pub fn finish(mut self) -> Csr {
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        row_ptr.push(0usize);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        for row in self.rows.iter_mut() {
            row.sort_by_key(|e| e.0);
            for &(j, v) in row.iter() {
                col_idx.push(j);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Csr { n: self.n, row_ptr, col_idx, vals }
    }
}

impl Csr {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = s;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// x . A y
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            let mut row = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row += self.vals[k] * y[self.col_idx[k]];
            }
            s += x[i] * row;
        }
        s
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] == i {
                    d[i] = self.vals[k];
                }
            }
        }
        d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            if self.col_idx[k] == j {
                return self.vals[k];
            }
        }
        0.0
    }

    /// Largest absolute asymmetry |A_ij - A_ji|; zero for our assembled forms.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                worst = worst.max((self.vals[k] - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Extract the principal submatrix on `keep` (sorted, deduped indices).
    pub fn submatrix(&self, keep: &[usize]) -> Csr {
        let mut pos = vec![usize::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            pos[old] = new;
        }
        let mut b = CsrBuilder::new(keep.len());
        for (new_i, &old_i) in keep.iter().enumerate() {
            for k in self.row_ptr[old_i]..self.row_ptr[old_i + 1] {
                let new_j = pos[self.col_idx[k]];
                if new_j != usize::MAX {
                    b.add(new_i, new_j, self.vals[k]);
                }
            }
        }
        b.finish()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn project_mean_zero(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// Iteration budget for a system with `n` unknowns.
pub fn iteration_cap(n: usize) -> usize {
    50 * (n as f64).sqrt().ceil() as usize + 1000
}

/// Jacobi-preconditioned CG for SPD systems; relative residual 1e-10.
pub fn pcg(a: &Csr, b: &[f64]) -> Result<(Vec<f64>, SolveStats), SolveError> {
    pcg_inner(a, b, false)
}

/// Jacobi-preconditioned CG on the mean-zero complement for consistent
/// singular systems (constant nullspace). Rejects loads whose component on
/// the nullspace exceeds 1e-8 * ||load||; returns the mean-zero solution.
pub fn pcg_deflated(a: &Csr, b: &[f64]) -> Result<(Vec<f64>, SolveStats), SolveError> {
    let imbalance = b.iter().sum::<f64>().abs();
    let scale = norm(b);
    if scale > 0.0 && imbalance > 1e-8 * scale {
        return Err(SolveError::IncompatibleLoad { imbalance });
    }
    pcg_inner(a, b, true)
}

fn pcg_inner(a: &Csr, b: &[f64], deflate: bool) -> Result<(Vec<f64>, SolveStats), SolveError> {
    const TOL: f64 = 1e-10;
    let n = a.n;
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], SolveStats { iterations: 0, rel_residual: 0.0 }));
    }
    let diag = a.diagonal();
    for (i, &d) in diag.iter().enumerate() {
        if d <= 0.0 {
            return Err(SolveError::BadDiagonal(i));
        }
    }
    let inv_diag: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();

    let cap = iteration_cap(n);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    if deflate {
        project_mean_zero(&mut r);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    if deflate {
        project_mean_zero(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = norm(&r) / b_norm;
    let mut ap = vec![0.0; n];
    for it in 0..cap {
        if res <= TOL {
            if deflate {
                project_mean_zero(&mut x);
            }
            return Ok((x, SolveStats { iterations: it, rel_residual: res }));
        }
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // loss of positivity: report as non-convergence with the current residual
            return Err(SolveError::NotConverged { iterations: it, rel_residual: res });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if deflate {
            project_mean_zero(&mut r);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        if deflate {
            project_mean_zero(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = norm(&r) / b_norm;
    }
    if res <= TOL {
        if deflate {
            project_mean_zero(&mut x);
        }
        return Ok((x, SolveStats { iterations: cap, rel_residual: res }));
    }
    Err(SolveError::NotConverged { iterations: cap, rel_residual: res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn laplacian_1d(n: usize) -> Csr {
        // tridiagonal [-1, 2, -1] with Dirichlet ends folded in
        let mut b = CsrBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 2.0);
            if i > 0 {
                b.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                b.add(i, i + 1, -1.0);
            }
        }
        b.finish()
    }

    #[test]
    fn pcg_matches_direct_on_tridiagonal() {
        let a = laplacian_1d(40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (x, stats) = pcg(&a, &b).unwrap();
        let r: Vec<f64> = a.apply(&x).iter().zip(&b).map(|(ax, bi)| bi - ax).collect();
        let rel = r.iter().map(|v| v * v).sum::<f64>().sqrt()
            / b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rel <= 1e-10, "residual {rel}");
        assert!(stats.iterations <= iteration_cap(40));
    }

    #[test]
    fn deflated_solver_returns_mean_zero_solution() {
        // singular graph Laplacian of a path
        let n = 25;
        let mut b = CsrBuilder::new(n);
        for i in 0..n - 1 {
            b.add(i, i, 1.0);
            b.add(i + 1, i + 1, 1.0);
            b.add(i, i + 1, -1.0);
            b.add(i + 1, i, -1.0);
        }
        let a = b.finish();
        let mut load = vec![0.0; n];
        load[0] = 1.0;
        load[n - 1] = -1.0;
        let (x, _) = pcg_deflated(&a, &load).unwrap();
        assert!(x.iter().sum::<f64>().abs() < 1e-9);
        let r: Vec<f64> = a.apply(&x).iter().zip(&load).map(|(ax, bi)| bi - ax).collect();
        assert!(r.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-9);
    }

    #[test]
    fn deflated_solver_rejects_incompatible_load() {
        let n = 9;
        let mut b = CsrBuilder::new(n);
        for i in 0..n - 1 {
            b.add(i, i, 1.0);
            b.add(i + 1, i + 1, 1.0);
            b.add(i, i + 1, -1.0);
            b.add(i + 1, i, -1.0);
        }
        let a = b.finish();
        let load = vec![1.0; n];
        match pcg_deflated(&a, &load) {
            Err(SolveError::IncompatibleLoad { .. }) => {}
            other => panic!("expected incompatibility error, got {other:?}"),
        }
    }

    #[test]
    fn zero_load_short_circuits() {
        let a = laplacian_1d(10);
        let (x, stats) = pcg(&a, &vec![0.0; 10]).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
        assert_eq!(stats.iterations, 0);
    }

    #[test]
    fn builder_combines_duplicates() {
        let mut b = CsrBuilder::new(2);
        b.add(0, 0, 1.0);
        b.add(0, 0, 2.5);
        b.add(0, 1, -1.0);
        b.add(1, 0, -1.0);
        b.add(1, 1, 3.5);
        let a = b.finish();
        assert_eq!(a.get(0, 0), 3.5);
        assert_eq!(a.asymmetry(), 0.0);
    }

    #[test]
    fn submatrix_extracts_interior() {
        let a = laplacian_1d(5);
        let s = a.submatrix(&[1, 2, 3]);
        assert_eq!(s.n, 3);
        assert_eq!(s.get(0, 0), 2.0);
        assert_eq!(s.get(0, 1), -1.0);
        assert_eq!(s.get(0, 2), 0.0);
    }
}
