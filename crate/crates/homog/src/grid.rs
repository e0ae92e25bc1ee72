//! Uniform multilinear finite elements on axis-aligned boxes.
//!
//! Geometry is exact: box corners are rationals whose denominator divides the
//! grid resolution, so node positions, unit-cell boundaries and sub-box
//! relations are all integer arithmetic in units of h = 1/res. With even res
//! every element lies inside a single unit cell of the coefficient field and
//! all quadratures below (stiffness, mass, gradient moments) are exact for
//! piecewise-multilinear functions with cellwise-constant coefficients.

use serde::{Deserialize, Serialize};

use crate::field::{CheckerboardField, FieldError, TriadicCube};
use crate::matrix::SymMat;
use crate::sparse::{self, Csr, CsrBuilder, SolveError, SolveStats};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid box: {0}")]
    BadBox(String),
    #[error("resolution {res} incompatible: {reason}")]
    BadResolution { res: usize, reason: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("grids are not nested: {0}")]
    NotNested(String),
}

/// Axis-aligned open box with rational corners lo/denom .. hi/denom.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub dim: usize,
    pub lo_num: Vec<i64>,
    pub hi_num: Vec<i64>,
    pub denom: i64,
}

impl BoxDomain {
    pub fn new(lo_num: Vec<i64>, hi_num: Vec<i64>, denom: i64) -> Result<Self, GridError> {
        if denom <= 0 {
            return Err(GridError::BadBox("denominator must be positive".into()));
        }
        if lo_num.len() != hi_num.len() || lo_num.is_empty() || lo_num.len() > 2 {
            return Err(GridError::BadBox("need matching lo/hi in dim 1 or 2".into()));
        }
        if lo_num.iter().zip(&hi_num).any(|(l, h)| l >= h) {
            return Err(GridError::BadBox("box must have positive side lengths".into()));
        }
        Ok(BoxDomain { dim: lo_num.len(), lo_num, hi_num, denom })
    }

    pub fn from_cube(cube: &TriadicCube) -> Self {
        let s = cube.side();
        BoxDomain {
            dim: cube.dim(),
            lo_num: cube.offset.iter().map(|o| 2 * o - s).collect(),
            hi_num: cube.offset.iter().map(|o| 2 * o + s).collect(),
            denom: 2,
        }
    }

    /// The centered cube (-half, half)^d with half = half_num/denom.
    pub fn centered(dim: usize, half_num: i64, denom: i64) -> Result<Self, GridError> {
        BoxDomain::new(vec![-half_num; dim], vec![half_num; dim], denom)
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.lo_num[axis] as f64 / self.denom as f64
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.hi_num[axis] as f64 / self.denom as f64
    }

    pub fn side(&self, axis: usize) -> f64 {
        (self.hi_num[axis] - self.lo_num[axis]) as f64 / self.denom as f64
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|i| self.side(i)).product()
    }

    /// |U|^(1/d), the length scale entering normalized norms.
    pub fn length_scale(&self) -> f64 {
        self.volume().powf(1.0 / self.dim as f64)
    }
}

/// Uniform grid over a box: `res` elements per unit length, node spacing 1/res.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub res: usize,
    /// Lower corner in units of 1/res.
    pub corner: Vec<i64>,
    /// Elements per axis.
    pub elems: Vec<usize>,
}

impl Grid {
    pub fn new(domain: &BoxDomain, res: usize) -> Result<Self, GridError> {
        if res < 2 || res % 2 != 0 {
            return Err(GridError::BadResolution {
                res,
                reason: "resolution must be even and at least 2 so unit-cell boundaries \
                         fall on grid nodes"
                    .into(),
            });
        }
        if res as i64 % domain.denom != 0 {
            return Err(GridError::BadResolution {
                res,
                reason: format!(
                    "box corners have denominator {}, which must divide the resolution",
                    domain.denom
                ),
            });
        }
        let scale = res as i64 / domain.denom;
        let corner: Vec<i64> = domain.lo_num.iter().map(|l| l * scale).collect();
        let elems: Vec<usize> = domain
            .lo_num
            .iter()
            .zip(&domain.hi_num)
            .map(|(l, h)| ((h - l) * scale) as usize)
            .collect();
        Ok(Grid { dim: domain.dim, res, corner, elems })
    }

    pub fn over_cube(cube: &TriadicCube, res: usize) -> Result<Self, GridError> {
        Grid::new(&BoxDomain::from_cube(cube), res)
    }

    pub fn h(&self) -> f64 {
        1.0 / self.res as f64
    }

    pub fn nodes_per_axis(&self, axis: usize) -> usize {
        self.elems[axis] + 1
    }

    pub fn node_count(&self) -> usize {
        (0..self.dim).map(|i| self.nodes_per_axis(i)).product()
    }

    pub fn element_count(&self) -> usize {
        self.elems.iter().product()
    }

    pub fn volume(&self) -> f64 {
        self.elems.iter().map(|&e| e as f64 * self.h()).product()
    }

    pub fn length_scale(&self) -> f64 {
        self.volume().powf(1.0 / self.dim as f64)
    }

    /// Flat node index, axis 0 slowest.
    pub fn node_flat(&self, idx: &[usize]) -> usize {
        let mut f = 0;
        for (i, &k) in idx.iter().enumerate() {
            f = f * self.nodes_per_axis(i) + k;
        }
        f
    }

    pub fn node_unflat(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim];
        for i in (0..self.dim).rev() {
            let n = self.nodes_per_axis(i);
            idx[i] = flat % n;
            flat /= n;
        }
        idx
    }

    pub fn node_coord(&self, flat: usize) -> Vec<f64> {
        self.node_unflat(flat)
            .iter()
            .enumerate()
            .map(|(i, &k)| (self.corner[i] + k as i64) as f64 * self.h())
            .collect()
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        let idx = self.node_unflat(flat);
        idx.iter().enumerate().any(|(i, &k)| k == 0 || k == self.elems[i])
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&f| !self.is_boundary(f)).collect()
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&f| self.is_boundary(f)).collect()
    }

    pub fn elem_flat(&self, idx: &[usize]) -> usize {
        let mut f = 0;
        for (i, &k) in idx.iter().enumerate() {
            f = f * self.elems[i] + k;
        }
        f
    }

    pub fn elem_unflat(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim];
        for i in (0..self.dim).rev() {
            idx[i] = flat % self.elems[i];
            flat /= self.elems[i];
        }
        idx
    }

    /// Unit cell of the coefficient field containing element `e` (by midpoint;
    /// exact because cell boundaries are node-aligned for even res).
    pub fn cell_of_element(&self, e: &[usize]) -> Vec<i64> {
        let r = self.res as i64;
        e.iter()
            .enumerate()
            .map(|(i, &k)| (2 * (self.corner[i] + k as i64) + 1 + r).div_euclid(2 * r))
            .collect()
    }

    /// Global flat node indices of the 2^d corners of element `e`, in local
    /// lexicographic order (axis 0 slowest).
    pub fn element_nodes(&self, e: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(1 << self.dim);
        for l in 0..(1usize << self.dim) {
            let idx: Vec<usize> = (0..self.dim)
                .map(|i| e[i] + ((l >> (self.dim - 1 - i)) & 1))
                .collect();
            out.push(self.node_flat(&idx));
        }
        out
    }

    /// Local corner offsets per axis for local index l, matching element_nodes.
    fn local_offsets(&self, l: usize) -> Vec<usize> {
        (0..self.dim).map(|i| (l >> (self.dim - 1 - i)) & 1).collect()
    }

    /// Map every node of `self` onto the node set of `parent`; requires equal
    /// res and containment.
    pub fn node_map_into(&self, parent: &Grid) -> Result<Vec<usize>, GridError> {
        if self.res != parent.res || self.dim != parent.dim {
            return Err(GridError::NotNested("resolution or dimension mismatch".into()));
        }
        for i in 0..self.dim {
            let off = self.corner[i] - parent.corner[i];
            if off < 0 || off as usize + self.elems[i] > parent.elems[i] {
                return Err(GridError::NotNested(format!("axis {i} extends outside parent")));
            }
        }
        let mut map = Vec::with_capacity(self.node_count());
        for f in 0..self.node_count() {
            let idx = self.node_unflat(f);
            let pidx: Vec<usize> = idx
                .iter()
                .enumerate()
                .map(|(i, &k)| k + (self.corner[i] - parent.corner[i]) as usize)
                .collect();
            map.push(parent.node_flat(&pidx));
        }
        Ok(map)
    }
}

/// 1-d element blocks on an interval of length h; the 2-d blocks are their
/// tensor products.
struct Blocks1 {
    /// k[i][j] = integral of phi_i' phi_j'
    k: [[f64; 2]; 2],
    /// m[i][j] = integral of phi_i phi_j
    m: [[f64; 2]; 2],
    /// c[i][j] = integral of phi_i' phi_j (no h factor)
    c: [[f64; 2]; 2],
}

fn blocks1(h: f64) -> Blocks1 {
    Blocks1 {
        k: [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]],
        m: [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]],
        c: [[-0.5, -0.5], [0.5, 0.5]],
    }
}

/// Local stiffness for the form grad v . A grad u with constant symmetric A.
fn local_stiffness(dim: usize, h: f64, a: &SymMat) -> Vec<Vec<f64>> {
    let b = blocks1(h);
    let n = 1usize << dim;
    let mut k = vec![vec![0.0; n]; n];
    if dim == 1 {
        for i in 0..2 {
            for j in 0..2 {
                k[i][j] = a.a11 * b.k[i][j];
            }
        }
    } else {
        for i in 0..n {
            let (ix, iy) = (i >> 1, i & 1);
            for j in 0..n {
                let (jx, jy) = (j >> 1, j & 1);
                let kxx = b.k[ix][jx] * b.m[iy][jy];
                let kyy = b.m[ix][jx] * b.k[iy][jy];
                let kxy = b.c[ix][jx] * b.c[jy][iy] + b.c[jx][ix] * b.c[iy][jy];
                k[i][j] = a.a11 * kxx + a.a22 * kyy + a.a12 * kxy;
            }
        }
    }
    k
}

fn local_mass(dim: usize, h: f64) -> Vec<Vec<f64>> {
    let b = blocks1(h);
    let n = 1usize << dim;
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = if dim == 1 {
                b.m[i][j]
            } else {
                b.m[i >> 1][j >> 1] * b.m[i & 1][j & 1]
            };
        }
    }
    m
}

/// integral over the element of d(phi_l)/d(axis); h^(d-1) scaling.
fn local_grad_integral(h: f64, axis: usize, l_off: &[usize]) -> f64 {
    let mut v = 1.0;
    for (i, &o) in l_off.iter().enumerate() {
        if i == axis {
            v *= if o == 0 { -1.0 } else { 1.0 };
        } else {
            v *= h / 2.0;
        }
    }
    v
}

/// c-block tensor entry: integral of d(phi_i)/d(axis) * phi_j over the element.
fn local_grad_mass(dim: usize, h: f64, axis: usize, i: usize, j: usize) -> f64 {
    let b = blocks1(h);
    if dim == 1 {
        b.c[i][j]
    } else {
        let (ix, iy) = (i >> 1, i & 1);
        let (jx, jy) = (j >> 1, j & 1);
        if axis == 0 {
            b.c[ix][jx] * b.m[iy][jy]
        } else {
            b.m[ix][jx] * b.c[iy][jy]
        }
    }
}

/// Coefficient source for assembly: the symmetric matrix on each unit cell.
pub trait Coefficient {
    fn at_cell(&self, z: &[i64]) -> Result<SymMat, FieldError>;
}

impl Coefficient for CheckerboardField {
    fn at_cell(&self, z: &[i64]) -> Result<SymMat, FieldError> {
        self.coeff_at_cell(z)
    }
}

/// Constant coefficient (homogenized solves, unit Laplacian).
pub struct ConstCoeff(pub SymMat);

impl Coefficient for ConstCoeff {
    fn at_cell(&self, _z: &[i64]) -> Result<SymMat, FieldError> {
        Ok(self.0)
    }
}

/// Elementwise iteration in lexicographic order, shared by all assembly loops.
fn for_each_element<F: FnMut(usize, &[usize]) -> Result<(), GridError>>(
    grid: &Grid,
    mut f: F,
) -> Result<(), GridError> {
    let mut e = vec![0usize; grid.dim];
    let total = grid.element_count();
    for flat in 0..total {
        f(flat, &e)?;
        let mut i = grid.dim;
        while i > 0 {
            i -= 1;
            e[i] += 1;
            if e[i] < grid.elems[i] {
                break;
            }
            e[i] = 0;
        }
    }
    Ok(())
}

/// Stiffness matrix of the bilinear form integral grad v . a grad u.
pub fn assemble_stiffness<C: Coefficient>(grid: &Grid, coeff: &C) -> Result<Csr, GridError> {
    let mut b = CsrBuilder::new(grid.node_count());
    let h = grid.h();
    let n_local = 1usize << grid.dim;
    for_each_element(grid, |_, e| {
        let a = coeff.at_cell(&grid.cell_of_element(e))?;
        let k = local_stiffness(grid.dim, h, &a);
        let nodes = grid.element_nodes(e);
        for i in 0..n_local {
            for j in 0..n_local {
                b.add(nodes[i], nodes[j], k[i][j]);
            }
        }
        Ok(())
    })?;
    Ok(b.finish())
}

/// Mass matrix (unit coefficient).
pub fn assemble_mass(grid: &Grid) -> Csr {
    let mut b = CsrBuilder::new(grid.node_count());
    let m = local_mass(grid.dim, grid.h());
    let n_local = 1usize << grid.dim;
    for_each_element(grid, |_, e| {
        let nodes = grid.element_nodes(e);
        for i in 0..n_local {
            for j in 0..n_local {
                b.add(nodes[i], nodes[j], m[i][j]);
            }
        }
        Ok(())
    })
    .expect("mass assembly is infallible");
    b.finish()
}

/// Load g_j = integral q . grad phi_j for a constant vector q; the natural
/// right-hand side of the pure flux problem.
pub fn divergence_load(grid: &Grid, q: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; grid.node_count()];
    let h = grid.h();
    let n_local = 1usize << grid.dim;
    for_each_element(grid, |_, e| {
        let nodes = grid.element_nodes(e);
        for l in 0..n_local {
            let off = grid.local_offsets(l);
            let mut v = 0.0;
            for (axis, &qa) in q.iter().enumerate() {
                v += qa * local_grad_integral(h, axis, &off);
            }
            g[nodes[l]] += v;
        }
        Ok(())
    })
    .expect("load assembly is infallible");
    g
}

/// Load l_j = integral w phi_j for the elementwise field w = (A grad u)_axis - shift,
/// with A from `coeff`. Used for flux residual functionals and dual norms.
pub fn flux_component_load<C: Coefficient>(
    grid: &Grid,
    coeff: &C,
    u: &[f64],
    axis: usize,
    shift: f64,
) -> Result<Vec<f64>, GridError> {
    let mut g = vec![0.0; grid.node_count()];
    let h = grid.h();
    let n_local = 1usize << grid.dim;
    for_each_element(grid, |_, e| {
        let a = coeff.at_cell(&grid.cell_of_element(e))?;
        let nodes = grid.element_nodes(e);
        // row of A picking the `axis` component of A grad u
        let row: Vec<f64> = (0..grid.dim).map(|b| a.get(axis, b)).collect();
        for j in 0..n_local {
            let mut v = 0.0;
            for i in 0..n_local {
                let mut gi = 0.0;
                for (b_axis, &ab) in row.iter().enumerate() {
                    gi += ab * local_grad_mass(grid.dim, h, b_axis, i, j);
                }
                v += u[nodes[i]] * gi;
            }
            // subtract the constant shift: integral shift * phi_j
            v -= shift * (h / 2.0).powi(grid.dim as i32 - 1) * (h / 2.0);
            g[nodes[j]] += v;
        }
        Ok(())
    })?;
    Ok(g)
}

/// Load l_j = integral (d u / d axis) phi_j (unit coefficient gradient moment).
pub fn grad_component_load(grid: &Grid, u: &[f64], axis: usize) -> Vec<f64> {
    flux_component_load(grid, &ConstCoeff(SymMat::identity(grid.dim)), u, axis, 0.0)
        .expect("constant coefficient cannot fail")
}

/// integral of u over the box (exact for multilinear u).
pub fn integral(grid: &Grid, u: &[f64]) -> f64 {
    let w = (grid.h() / 2.0).powi(grid.dim as i32);
    let n_local = 1usize << grid.dim;
    let mut s = 0.0;
    for_each_element(grid, |_, e| {
        let nodes = grid.element_nodes(e);
        for l in 0..n_local {
            s += w * u[nodes[l]];
        }
        Ok(())
    })
    .expect("integration is infallible");
    s
}

/// Per-element integrals of u, indexed by flat element index.
pub fn element_integrals(grid: &Grid, u: &[f64]) -> Vec<f64> {
    let w = (grid.h() / 2.0).powi(grid.dim as i32);
    let n_local = 1usize << grid.dim;
    let mut out = vec![0.0; grid.element_count()];
    for_each_element(grid, |flat, e| {
        let nodes = grid.element_nodes(e);
        out[flat] = (0..n_local).map(|l| w * u[nodes[l]]).sum();
        Ok(())
    })
    .expect("integration is infallible");
    out
}

/// Per-element integrals of du/d(axis).
pub fn element_grad_integrals(grid: &Grid, u: &[f64], axis: usize) -> Vec<f64> {
    let h = grid.h();
    let n_local = 1usize << grid.dim;
    let mut out = vec![0.0; grid.element_count()];
    for_each_element(grid, |flat, e| {
        let nodes = grid.element_nodes(e);
        let mut s = 0.0;
        for l in 0..n_local {
            let off = grid.local_offsets(l);
            s += u[nodes[l]] * local_grad_integral(h, axis, &off);
        }
        out[flat] = s;
        Ok(())
    })
    .expect("integration is infallible");
    out
}

/// Mean of grad u over the box.
pub fn average_gradient(grid: &Grid, u: &[f64]) -> Vec<f64> {
    let vol = grid.volume();
    (0..grid.dim)
        .map(|axis| element_grad_integrals(grid, u, axis).iter().sum::<f64>() / vol)
        .collect()
}

/// Mean of a grad u over the box.
pub fn average_flux<C: Coefficient>(
    grid: &Grid,
    coeff: &C,
    u: &[f64],
) -> Result<Vec<f64>, GridError> {
    let h = grid.h();
    let n_local = 1usize << grid.dim;
    let mut acc = vec![0.0; grid.dim];
    for_each_element(grid, |_, e| {
        let a = coeff.at_cell(&grid.cell_of_element(e))?;
        let nodes = grid.element_nodes(e);
        // element integral of grad u
        let mut ge = vec![0.0; grid.dim];
        for l in 0..n_local {
            let off = grid.local_offsets(l);
            for (axis, g) in ge.iter_mut().enumerate() {
                *g += u[nodes[l]] * local_grad_integral(h, axis, &off);
            }
        }
        let flux = a.matvec(&ge);
        for (axis, f) in flux.iter().enumerate() {
            acc[axis] += f;
        }
        Ok(())
    })?;
    let vol = grid.volume();
    Ok(acc.iter().map(|v| v / vol).collect())
}

/// integral of u v (exact mass inner product, no assembled matrix needed).
pub fn l2_inner(grid: &Grid, u: &[f64], v: &[f64]) -> f64 {
    let m = local_mass(grid.dim, grid.h());
    let n_local = 1usize << grid.dim;
    let mut s = 0.0;
    for_each_element(grid, |_, e| {
        let nodes = grid.element_nodes(e);
        for i in 0..n_local {
            for j in 0..n_local {
                s += u[nodes[i]] * m[i][j] * v[nodes[j]];
            }
        }
        Ok(())
    })
    .expect("integration is infallible");
    s
}

/// integral of |grad u|^2 (unit coefficient energy).
pub fn grad_sq_integral(grid: &Grid, u: &[f64]) -> f64 {
    let k = local_stiffness(grid.dim, grid.h(), &SymMat::identity(grid.dim));
    let n_local = 1usize << grid.dim;
    let mut s = 0.0;
    for_each_element(grid, |_, e| {
        let nodes = grid.element_nodes(e);
        for i in 0..n_local {
            for j in 0..n_local {
                s += u[nodes[i]] * k[i][j] * u[nodes[j]];
            }
        }
        Ok(())
    })
    .expect("integration is infallible");
    s
}

/// Per-element integrals of |grad u|^2, indexed by flat element number.
pub fn element_grad_sq_integrals(grid: &Grid, u: &[f64]) -> Vec<f64> {
    let k = local_stiffness(grid.dim, grid.h(), &SymMat::identity(grid.dim));
    let n_local = 1usize << grid.dim;
    let mut out = vec![0.0; grid.element_count()];
    for_each_element(grid, |f, e| {
        let nodes = grid.element_nodes(e);
        let mut s = 0.0;
        for i in 0..n_local {
            for j in 0..n_local {
                s += u[nodes[i]] * k[i][j] * u[nodes[j]];
            }
        }
        out[f] = s;
        Ok(())
    })
    .expect("integration is infallible");
    out
}

/// Riesz matrix |U|^(-2/d) M + K_Id of the Hilbertian surrogate H^1 inner
/// product. Entries are unnormalized; quadratic forms need a 1/|U| factor.
pub fn assemble_h1_riesz(grid: &Grid) -> Csr {
    let w = grid.volume().powf(-2.0 / grid.dim as f64);
    let mut b = CsrBuilder::new(grid.node_count());
    let k = local_stiffness(grid.dim, grid.h(), &SymMat::identity(grid.dim));
    let m = local_mass(grid.dim, grid.h());
    let n_local = 1usize << grid.dim;
    for_each_element(grid, |_, e| {
        let nodes = grid.element_nodes(e);
        for i in 0..n_local {
            for j in 0..n_local {
                b.add(nodes[i], nodes[j], w * m[i][j] + k[i][j]);
            }
        }
        Ok(())
    })
    .expect("assembly is infallible");
    b.finish()
}

/// Result of a boundary-value solve: full nodal vector plus solver stats.
#[derive(Debug, Clone)]
pub struct Solution {
    pub values: Vec<f64>,
    pub stats: SolveStats,
}

/// Dirichlet solve: K u = load in the interior, u = data on the boundary.
/// `data` supplies nodal boundary values; `load` may be empty (zero).
pub fn solve_dirichlet_nodal(
    grid: &Grid,
    k: &Csr,
    data: &dyn Fn(&[f64]) -> f64,
    load: Option<&[f64]>,
) -> Result<Solution, GridError> {
    let n = grid.node_count();
    let mut u = vec![0.0; n];
    for f in 0..n {
        if grid.is_boundary(f) {
            u[f] = data(&grid.node_coord(f));
        }
    }
    solve_dirichlet_values(grid, k, u, load)
}

/// Dirichlet solve from a full-length nodal vector whose boundary entries
/// carry the data (interior entries are ignored and overwritten).
pub fn solve_dirichlet_values(
    grid: &Grid,
    k: &Csr,
    mut u: Vec<f64>,
    load: Option<&[f64]>,
) -> Result<Solution, GridError> {
    let n = grid.node_count();
    assert_eq!(u.len(), n);
    for f in 0..n {
        if !grid.is_boundary(f) {
            u[f] = 0.0;
        }
    }
    let interior = grid.interior_nodes();
    if interior.is_empty() {
        return Ok(Solution { values: u, stats: SolveStats { iterations: 0, rel_residual: 0.0 } });
    }
    // rhs_i = load_i - sum_j K_ij u_b(j)
    let ku = k.apply(&u);
    let mut rhs: Vec<f64> = interior.iter().map(|&i| -ku[i]).collect();
    if let Some(l) = load {
        for (r, &i) in rhs.iter_mut().zip(&interior) {
            *r += l[i];
        }
    }
    let kii = k.submatrix(&interior);
    let (x, stats) = sparse::pcg(&kii, &rhs)?;
    for (&i, v) in interior.iter().zip(x) {
        u[i] = v;
    }
    Ok(Solution { values: u, stats })
}

/// Pure flux solve: K u = load with natural boundary conditions; the constant
/// nullspace is deflated and the result normalized to integral mean zero.
pub fn solve_neumann(grid: &Grid, k: &Csr, load: &[f64]) -> Result<Solution, GridError> {
    let (mut u, stats) = sparse::pcg_deflated(k, load)?;
    let mean = integral(grid, &u) / grid.volume();
    for v in u.iter_mut() {
        *v -= mean;
    }
    Ok(Solution { values: u, stats })
}

/// Nodal function on a grid with restrict / extend operations.
#[derive(Debug, Clone)]
pub struct GridFn {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridFn {
    pub fn new(grid: Grid, values: Vec<f64>) -> Self {
        assert_eq!(grid.node_count(), values.len());
        GridFn { grid, values }
    }

    pub fn from_closure(grid: Grid, f: &dyn Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.node_count()).map(|i| f(&grid.node_coord(i))).collect();
        GridFn { grid, values }
    }

    /// Restriction onto a sub-grid (same res, contained box).
    pub fn restrict(&self, sub: &Grid) -> Result<GridFn, GridError> {
        let map = sub.node_map_into(&self.grid)?;
        Ok(GridFn { grid: sub.clone(), values: map.iter().map(|&p| self.values[p]).collect() })
    }

    /// Extension by zero onto a super-grid.
    pub fn extend_zero(&self, parent: &Grid) -> Result<GridFn, GridError> {
        let map = self.grid.node_map_into(parent)?;
        let mut values = vec![0.0; parent.node_count()];
        for (local, &p) in map.iter().enumerate() {
            values[p] = self.values[local];
        }
        Ok(GridFn { grid: parent.clone(), values })
    }
}
