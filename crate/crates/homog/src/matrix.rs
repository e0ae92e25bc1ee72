//! Small symmetric d x d matrices, d in {1, 2}.
//!
//! Effective-coefficient matrices are symmetric positive definite and tiny, so
//! everything here is closed form: eigenvalues from the quadratic formula,
//! inverses from the adjugate, operator norm as the largest |eigenvalue|.

use serde::{Deserialize, Serialize};

/// Symmetric matrix stored as (a11, a22, a12); for dim 1 only a11 is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymMat {
    pub dim: usize,
    pub a11: f64,
    pub a22: f64,
    pub a12: f64,
}

impl SymMat {
    pub fn zero(dim: usize) -> Self {
        assert!(dim == 1 || dim == 2, "only dim 1 and 2 are supported");
        SymMat { dim, a11: 0.0, a22: 0.0, a12: 0.0 }
    }

    pub fn scalar(dim: usize, c: f64) -> Self {
        let mut m = Self::zero(dim);
        m.a11 = c;
        if dim == 2 {
            m.a22 = c;
        }
        m
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0)
    }

    pub fn diag(dim: usize, d: &[f64]) -> Self {
        let mut m = Self::zero(dim);
        m.a11 = d[0];
        if dim == 2 {
            m.a22 = d[1];
        }
        m
    }

    /// Entry (i, j), zero-based.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match (i, j) {
            (0, 0) => self.a11,
            (1, 1) => self.a22,
            (0, 1) | (1, 0) => self.a12,
            _ => panic!("index out of range"),
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        match (i, j) {
            (0, 0) => self.a11 = v,
            (1, 1) => self.a22 = v,
            (0, 1) | (1, 0) => self.a12 = v,
            _ => panic!("index out of range"),
        }
    }

    pub fn add(&self, o: &SymMat) -> SymMat {
        debug_assert_eq!(self.dim, o.dim);
        SymMat { dim: self.dim, a11: self.a11 + o.a11, a22: self.a22 + o.a22, a12: self.a12 + o.a12 }
    }

    pub fn sub(&self, o: &SymMat) -> SymMat {
        debug_assert_eq!(self.dim, o.dim);
        SymMat { dim: self.dim, a11: self.a11 - o.a11, a22: self.a22 - o.a22, a12: self.a12 - o.a12 }
    }

    pub fn scale(&self, t: f64) -> SymMat {
        SymMat { dim: self.dim, a11: t * self.a11, a22: t * self.a22, a12: t * self.a12 }
    }

    pub fn matvec(&self, p: &[f64]) -> Vec<f64> {
        if self.dim == 1 {
            vec![self.a11 * p[0]]
        } else {
            vec![self.a11 * p[0] + self.a12 * p[1], self.a12 * p[0] + self.a22 * p[1]]
        }
    }

    /// p . A p
    pub fn quad_form(&self, p: &[f64]) -> f64 {
        if self.dim == 1 {
            self.a11 * p[0] * p[0]
        } else {
            self.a11 * p[0] * p[0] + 2.0 * self.a12 * p[0] * p[1] + self.a22 * p[1] * p[1]
        }
    }

    /// Eigenvalues sorted ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.dim == 1 {
            vec![self.a11]
        } else {
            let tr = self.a11 + self.a22;
            // discriminant written to stay non-negative under roundoff
            let gap = ((self.a11 - self.a22) * 0.5).hypot(self.a12);
            vec![0.5 * tr - gap, 0.5 * tr + gap]
        }
    }

    pub fn det(&self) -> f64 {
        if self.dim == 1 {
            self.a11
        } else {
            self.a11 * self.a22 - self.a12 * self.a12
        }
    }

    /// Inverse; the caller guarantees the matrix is nonsingular.
    pub fn inverse(&self) -> SymMat {
        if self.dim == 1 {
            SymMat { dim: 1, a11: 1.0 / self.a11, a22: 0.0, a12: 0.0 }
        } else {
            let d = self.det();
            SymMat { dim: 2, a11: self.a22 / d, a22: self.a11 / d, a12: -self.a12 / d }
        }
    }

    /// Operator norm = spectral radius for symmetric matrices.
    pub fn op_norm(&self) -> f64 {
        self.eigenvalues().into_iter().fold(0.0, |m, e| m.max(e.abs()))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues().last().unwrap()
    }

    /// self <= other in the quadratic-form order, up to `tol` on eigenvalues.
    pub fn le(&self, other: &SymMat, tol: f64) -> bool {
        other.sub(self).min_eigenvalue() >= -tol
    }

    /// Flat entries in the documented output order: a11 for dim 1; a11, a12, a22 for dim 2.
    pub fn flat_entries(&self) -> Vec<f64> {
        if self.dim == 1 {
            vec![self.a11]
        } else {
            vec![self.a11, self.a12, self.a22]
        }
    }

    pub fn entry_labels(dim: usize) -> Vec<&'static str> {
        if dim == 1 {
            vec!["a11"]
        } else {
            vec!["a11", "a12", "a22"]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_match_hand_values() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let m = SymMat { dim: 2, a11: 2.0, a22: 2.0, a12: 1.0 };
        let e = m.eigenvalues();
        assert!((e[0] - 1.0).abs() < 1e-14);
        assert!((e[1] - 3.0).abs() < 1e-14);
        assert!((m.op_norm() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn inverse_roundtrip() {
        let m = SymMat { dim: 2, a11: 3.0, a22: 5.0, a12: -1.0 };
        let inv = m.inverse();
        let p = [0.3, -0.7];
        let mp = m.matvec(&p);
        let back = inv.matvec(&mp);
        assert!((back[0] - p[0]).abs() < 1e-14);
        assert!((back[1] - p[1]).abs() < 1e-14);
    }

    #[test]
    fn order_check() {
        let a = SymMat::scalar(2, 1.0);
        let b = SymMat { dim: 2, a11: 2.0, a22: 3.0, a12: 0.5 };
        assert!(a.le(&b, 1e-12));
        assert!(!b.le(&a, 1e-12));
    }

    #[test]
    fn quad_form_matches_matvec() {
        let m = SymMat { dim: 2, a11: 2.0, a22: 4.0, a12: 0.3 };
        let p = [1.5, -2.0];
        let mp = m.matvec(&p);
        assert!((m.quad_form(&p) - (p[0] * mp[0] + p[1] * mp[1])).abs() < 1e-12);
    }
}
