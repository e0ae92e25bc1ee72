//! Random checkerboard coefficient fields.
//!
//! A field assigns one positive scalar conductance to every unit cell
//! z + (-1/2, 1/2)^d of the integer lattice, drawn i.i.d. from a marginal law.
//! Draws are keyed on the absolute lattice coordinate of the cell through a
//! fixed 64-bit hash of (master_seed, z), so enlarging the sampled window or
//! shifting the field never reshuffles existing cells and identical
//! (law, seed, extent) triples reproduce identical tables bit for bit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::SymMat;
use crate::quad::{self, QuadError};

/// Marginal law of a single cell conductance. All laws are supported on
/// (0, inf) and carry analytic distribution functions used by the quadrature
/// moments below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginalLaw {
    /// Deterministic value c > 0.
    Constant { value: f64 },
    /// Two atoms lo < hi; `p_hi` is the probability of drawing hi.
    TwoPoint { lo: f64, hi: f64, p_hi: f64 },
    /// b = exp(U) with U uniform on (-spread, spread); support [e^-s, e^s].
    BoundedLogUniform { spread: f64 },
    /// Unbounded law with stretched-exponential tails on both b and 1/b.
    /// A fair coin picks one branch: heads gives b = floor + scale * E^(1/k_upper),
    /// tails gives b = 1 / (floor + scale * E^(1/k_lower)), E standard exponential.
    /// Conditional on its branch, P(b > t) = exp(-((t - floor)/scale)^k_upper) for
    /// t >= floor, and symmetrically for 1/b. Requires floor > 0 so the upper
    /// branch stays away from zero.
    WeibullTail { k_upper: f64, k_lower: f64, floor: f64, scale: f64 },
}

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("invalid law parameters: {0}")]
    InvalidLaw(String),
    #[error("cell {0:?} is outside the sampled extent")]
    Coverage(Vec<i64>),
    #[error("law unsuitable for this moment: {0}")]
    LawUnsuitable(String),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("fixture mismatch: {0}")]
    Fixture(String),
}

impl MarginalLaw {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::InvalidLaw(m.to_string()));
        match *self {
            MarginalLaw::Constant { value } => {
                if !(value > 0.0 && value.is_finite()) {
                    return bad("constant value must be positive and finite");
                }
            }
            MarginalLaw::TwoPoint { lo, hi, p_hi } => {
                if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                    return bad("two_point needs 0 < lo < hi < inf");
                }
                if !(0.0..=1.0).contains(&p_hi) {
                    return bad("two_point probability must lie in [0, 1]");
                }
            }
            MarginalLaw::BoundedLogUniform { spread } => {
                if !(spread > 0.0 && spread.is_finite()) {
                    return bad("bounded_log_uniform spread must be positive and finite");
                }
            }
            MarginalLaw::WeibullTail { k_upper, k_lower, floor, scale } => {
                if !(k_upper > 0.0 && k_lower > 0.0 && scale > 0.0) {
                    return bad("weibull_tail exponents and scale must be positive");
                }
                if !(floor > 0.0) {
                    return bad("weibull_tail floor must be positive");
                }
            }
        }
        Ok(())
    }

    /// Documented tail exponents (beta, gamma): the exponential-moment
    /// conditions E[exp(b^beta)] < inf and E[exp(b^-gamma)] < inf hold for all
    /// beta < .0 and gamma < .1. Bounded laws report infinity on both sides.
    pub fn tail_exponents(&self) -> (f64, f64) {
        match *self {
            MarginalLaw::WeibullTail { k_upper, k_lower, .. } => (k_upper, k_lower),
            _ => (f64::INFINITY, f64::INFINITY),
        }
    }

    /// Midpoint of the admissible rate-exponent window (1/beta + 1/gamma, 1/3);
    /// bounded laws get 1/6. Used by the convergence-study regression.
    pub fn implied_alpha(&self) -> f64 {
        let (beta, gamma) = self.tail_exponents();
        let lo = 1.0 / beta + 1.0 / gamma;
        0.5 * (lo + 1.0 / 3.0)
    }

    /// One draw. The exact consumption of the RNG stream is part of the
    /// fixture contract: one uniform for the atoms / log-uniform laws, one
    /// coin uniform plus one exponential uniform for weibull_tail.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            MarginalLaw::Constant { value } => value,
            MarginalLaw::TwoPoint { lo, hi, p_hi } => {
                let u: f64 = rng.gen();
                if u < p_hi {
                    hi
                } else {
                    lo
                }
            }
            MarginalLaw::BoundedLogUniform { spread } => {
                let u: f64 = rng.gen();
                (spread * (2.0 * u - 1.0)).exp()
            }
            MarginalLaw::WeibullTail { k_upper, k_lower, floor, scale } => {
                let coin: f64 = rng.gen();
                let u: f64 = rng.gen();
                // inverse-CDF exponential; u in [0,1) keeps the log argument in (0,1]
                let e = -(1.0 - u).ln();
                if coin < 0.5 {
                    floor + scale * e.powf(1.0 / k_upper)
                } else {
                    1.0 / (floor + scale * e.powf(1.0 / k_lower))
                }
            }
        }
    }

    /// P(b <= t).
    pub fn cdf(&self, t: f64) -> f64 {
        match *self {
            MarginalLaw::Constant { value } => {
                if t >= value {
                    1.0
                } else {
                    0.0
                }
            }
            MarginalLaw::TwoPoint { lo, hi, p_hi } => {
                if t < lo {
                    0.0
                } else if t < hi {
                    1.0 - p_hi
                } else {
                    1.0
                }
            }
            MarginalLaw::BoundedLogUniform { spread } => {
                if t <= (-spread).exp() {
                    0.0
                } else if t >= spread.exp() {
                    1.0
                } else {
                    (t.ln() + spread) / (2.0 * spread)
                }
            }
            MarginalLaw::WeibullTail { k_upper, k_lower, floor, scale } => {
                // mixture of the two branch CDFs
                let up = if t <= floor {
                    0.0
                } else {
                    1.0 - (-((t - floor) / scale).powf(k_upper)).exp()
                };
                let rec = if t <= 0.0 {
                    0.0
                } else if t >= 1.0 / floor {
                    1.0
                } else {
                    (-((1.0 / t - floor) / scale).powf(k_lower)).exp()
                };
                0.5 * (up + rec)
            }
        }
    }

    /// Density where the law is continuous; atoms are handled separately by
    /// `expectation`, never through this function.
    pub(crate) fn pdf(&self, t: f64) -> f64 {
        match *self {
            MarginalLaw::Constant { .. } | MarginalLaw::TwoPoint { .. } => 0.0,
            MarginalLaw::BoundedLogUniform { spread } => {
                if t > (-spread).exp() && t < spread.exp() {
                    1.0 / (2.0 * spread * t)
                } else {
                    0.0
                }
            }
            MarginalLaw::WeibullTail { k_upper, k_lower, floor, scale } => {
                let mut d = 0.0;
                if t > floor {
                    let y = (t - floor) / scale;
                    d += 0.5 * (k_upper / scale) * y.powf(k_upper - 1.0) * (-y.powf(k_upper)).exp();
                }
                if t > 0.0 && t < 1.0 / floor {
                    let y = (1.0 / t - floor) / scale;
                    d += 0.5
                        * (k_lower / (scale * t * t))
                        * y.powf(k_lower - 1.0)
                        * (-y.powf(k_lower)).exp();
                }
                d
            }
        }
    }

    /// Support endpoints plus interior kinks, truncated so the omitted tail
    /// mass is below 1e-300 in probability. With stretched-exponential tails
    /// the truncation point grows like log^(1/k), so any integrand dominated
    /// by exp(t^p) with p < k_upper is captured in full.
    pub(crate) fn breakpoints(&self) -> Vec<f64> {
        const LOG_EPS: f64 = 690.0; // -ln(1e-300)
        match *self {
            MarginalLaw::Constant { value } => vec![value],
            MarginalLaw::TwoPoint { lo, hi, .. } => vec![lo, hi],
            MarginalLaw::BoundedLogUniform { spread } => {
                vec![(-spread).exp(), 1.0, spread.exp()]
            }
            MarginalLaw::WeibullTail { k_upper, k_lower, floor, scale } => {
                let hi = floor + scale * LOG_EPS.powf(1.0 / k_upper);
                let lo = 1.0 / (floor + scale * LOG_EPS.powf(1.0 / k_lower));
                let mut pts = vec![lo, floor, 1.0 / floor, hi];
                pts.retain(|p| p.is_finite());
                pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                pts.dedup();
                pts
            }
        }
    }

    /// E[f(b)] against the analytic law: exact sums for atomic laws,
    /// adaptive quadrature of f * pdf for continuous ones.
    pub fn expectation<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64, FieldError> {
        match *self {
            MarginalLaw::Constant { value } => Ok(f(value)),
            MarginalLaw::TwoPoint { lo, hi, p_hi } => Ok((1.0 - p_hi) * f(lo) + p_hi * f(hi)),
            _ => {
                let pts = self.breakpoints();
                Ok(quad::integrate_split(&|t| f(t) * self.pdf(t), &pts, 1e-12)?)
            }
        }
    }

    pub fn mean(&self) -> Result<f64, FieldError> {
        self.expectation(|t| t)
    }

    pub fn mean_reciprocal(&self) -> Result<f64, FieldError> {
        self.expectation(|t| 1.0 / t)
    }

    /// E[exp(b^power)]. Errors out when the integral diverges
    /// (weibull_tail with k_upper <= power).
    pub fn exp_moment(&self, power: f64) -> Result<f64, FieldError> {
        if let MarginalLaw::WeibullTail { k_upper, .. } = *self {
            if k_upper <= power {
                return Err(FieldError::LawUnsuitable(format!(
                    "E[exp(b^{power})] diverges: upper tail exponent {k_upper} <= {power}"
                )));
            }
        }
        self.expectation(|t| t.powf(power).exp())
    }

    /// Effective matrix known in closed form, where available:
    /// 1-d harmonic mean of the law for every law; 2-d geometric mean for
    /// phase-symmetric laws (two_point at p = 1/2 by duality, log-uniform by
    /// log-symmetry); constants in any dimension.
    pub fn closed_form_effective(&self, dim: usize) -> Option<SymMat> {
        if let MarginalLaw::Constant { value } = *self {
            return Some(SymMat::scalar(dim, value));
        }
        if dim == 1 {
            return self.mean_reciprocal().ok().map(|m| SymMat::scalar(1, 1.0 / m));
        }
        match *self {
            MarginalLaw::TwoPoint { lo, hi, p_hi } if p_hi == 0.5 => {
                Some(SymMat::scalar(2, (lo * hi).sqrt()))
            }
            MarginalLaw::BoundedLogUniform { .. } => Some(SymMat::scalar(2, 1.0)),
            _ => None,
        }
    }
}

impl std::fmt::Display for MarginalLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MarginalLaw::Constant { value } => write!(f, "constant({value})"),
            MarginalLaw::TwoPoint { lo, hi, p_hi } => write!(f, "two_point({lo},{hi},{p_hi})"),
            MarginalLaw::BoundedLogUniform { spread } => {
                write!(f, "bounded_log_uniform({spread})")
            }
            MarginalLaw::WeibullTail { k_upper, k_lower, floor, scale } => {
                write!(f, "weibull_tail({k_upper},{k_lower},{floor},{scale})")
            }
        }
    }
}

/// Triadic cube of side 3^scale centered at an integer lattice offset:
/// offset + (-3^scale/2, 3^scale/2)^d.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriadicCube {
    pub scale: u32,
    pub offset: Vec<i64>,
}

impl TriadicCube {
    pub fn centered(scale: u32, dim: usize) -> Self {
        TriadicCube { scale, offset: vec![0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn side(&self) -> i64 {
        3i64.pow(self.scale)
    }

    pub fn volume(&self) -> f64 {
        (self.side() as f64).powi(self.dim() as i32)
    }

    pub fn cell_count(&self) -> usize {
        (self.side() as usize).pow(self.dim() as u32)
    }

    /// All unit-cell centers inside the cube, lexicographic order.
    pub fn cells(&self) -> Vec<Vec<i64>> {
        let half = (self.side() - 1) / 2;
        let mut out = Vec::with_capacity(self.cell_count());
        let mut idx = vec![-half; self.dim()];
        loop {
            out.push(idx.iter().zip(&self.offset).map(|(i, o)| i + o).collect());
            // odometer increment
            let mut k = self.dim();
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] <= half {
                    break;
                }
                idx[k] = -half;
            }
        }
    }

    /// The 3^((scale-m)*d) subcubes of scale m tiling this cube, lexicographic
    /// in their offsets.
    pub fn children(&self, m: u32) -> Vec<TriadicCube> {
        assert!(m <= self.scale);
        let step = 3i64.pow(m);
        let count = 3i64.pow(self.scale - m);
        let half = (count - 1) / 2;
        let mut out = Vec::new();
        let mut idx = vec![-half; self.dim()];
        loop {
            let offset: Vec<i64> =
                idx.iter().zip(&self.offset).map(|(i, o)| i * step + o).collect();
            out.push(TriadicCube { scale: m, offset });
            let mut k = self.dim();
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] <= half {
                    break;
                }
                idx[k] = -half;
            }
        }
    }

    pub fn translated(&self, z: &[i64]) -> TriadicCube {
        TriadicCube {
            scale: self.scale,
            offset: self.offset.iter().zip(z).map(|(o, s)| o + s).collect(),
        }
    }

    pub fn contains_cube(&self, other: &TriadicCube) -> bool {
        if other.scale > self.scale || other.dim() != self.dim() {
            return false;
        }
        // compare corners in half-integer units to stay exact
        let (s, t) = (self.side(), other.side());
        (0..self.dim()).all(|i| {
            2 * other.offset[i] - t >= 2 * self.offset[i] - s
                && 2 * other.offset[i] + t <= 2 * self.offset[i] + s
        })
    }
}

const SEED_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; the fixed mixing primitive behind all seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(SEED_GAMMA);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the cell at absolute lattice coordinate z: chain one SplitMix64
/// round per coordinate into the master seed. Order-sensitive, so (1,2) and
/// (2,1) land in different streams.
pub fn cell_seed(master_seed: u64, z: &[i64]) -> u64 {
    let mut s = splitmix64(master_seed);
    for &c in z {
        s = splitmix64(s ^ (c as u64).wrapping_mul(SEED_GAMMA));
    }
    s
}

/// Master seed of Monte Carlo sample `index`; a disjoint domain from cell
/// seeds (extra tag word) so per-sample fields never collide with cell draws.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master_seed ^ 0x5CA1_AB1E_0000_0000) ^ index)
}

/// A sampled checkerboard realization: the cell table plus the recipe
/// (law, master seed) that deterministically extends it.
#[derive(Debug, Clone)]
pub struct CheckerboardField {
    pub dim: usize,
    pub law: MarginalLaw,
    pub master_seed: u64,
    /// Accumulated lattice shift: the value at cell z is drawn from the seed
    /// of absolute coordinate z + shift.
    pub shift: Vec<i64>,
    pub extent: TriadicCube,
    cells: BTreeMap<Vec<i64>, f64>,
}

impl CheckerboardField {
    /// Sample all cells of `extent`.
    pub fn sample(
        law: MarginalLaw,
        dim: usize,
        master_seed: u64,
        extent: TriadicCube,
    ) -> Result<Self, FieldError> {
        assert!(dim == 1 || dim == 2, "only dim 1 and 2 are supported");
        assert_eq!(extent.dim(), dim);
        law.validate()?;
        let mut field = CheckerboardField {
            dim,
            law,
            master_seed,
            shift: vec![0; dim],
            extent: extent.clone(),
            cells: BTreeMap::new(),
        };
        field.ensure_cover(&extent);
        Ok(field)
    }

    fn draw_cell(&self, z: &[i64]) -> f64 {
        let abs: Vec<i64> = z.iter().zip(&self.shift).map(|(a, s)| a + s).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(self.master_seed, &abs));
        self.law.draw(&mut rng)
    }

    /// Enlarge the sampled window to cover `cube`. Existing cells are kept
    /// untouched; new ones are drawn from their absolute-coordinate seeds.
    pub fn ensure_cover(&mut self, cube: &TriadicCube) {
        for z in cube.cells() {
            if !self.cells.contains_key(&z) {
                let v = self.draw_cell(&z);
                self.cells.insert(z, v);
            }
        }
        if !self.extent.contains_cube(cube) && cube.contains_cube(&self.extent) {
            self.extent = cube.clone();
        }
    }

    pub fn value_at_cell(&self, z: &[i64]) -> Result<f64, FieldError> {
        self.cells.get(z).copied().ok_or_else(|| FieldError::Coverage(z.to_vec()))
    }

    /// Scalar coefficient at a continuum point: the value of the unit cell
    /// containing x (cells are half-open on the upper side).
    pub fn eval(&self, x: &[f64]) -> Result<f64, FieldError> {
        let z: Vec<i64> = x.iter().map(|&c| (c + 0.5).floor() as i64).collect();
        self.value_at_cell(&z)
    }

    /// Matrix coefficient at the cell: scalar times identity. Extension point
    /// for matrix-valued ensembles.
    pub fn coeff_at_cell(&self, z: &[i64]) -> Result<SymMat, FieldError> {
        Ok(SymMat::scalar(self.dim, self.value_at_cell(z)?))
    }

    /// Ellipticity extremes over the cells of `cube`: (min, max) of the cell
    /// values, which are the extreme eigenvalues for scalar cells.
    pub fn lambda_extremes(&self, cube: &TriadicCube) -> Result<(f64, f64), FieldError> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for z in cube.cells() {
            let v = self.value_at_cell(&z)?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok((lo, hi))
    }

    /// The translated field (T_z a)(x) = a(x + z), with the sampled window
    /// translated accordingly. Values keep their absolute-coordinate seeds.
    pub fn shifted(&self, z: &[i64]) -> CheckerboardField {
        assert_eq!(z.len(), self.dim);
        let cells = self
            .cells
            .iter()
            .map(|(w, &v)| (w.iter().zip(z).map(|(a, s)| a - s).collect(), v))
            .collect();
        CheckerboardField {
            dim: self.dim,
            law: self.law.clone(),
            master_seed: self.master_seed,
            shift: self.shift.iter().zip(z).map(|(a, s)| a + s).collect(),
            extent: self.extent.translated(&z.iter().map(|c| -c).collect::<Vec<_>>()),
            cells,
        }
    }

    pub fn cell_table(&self) -> &BTreeMap<Vec<i64>, f64> {
        &self.cells
    }

    /// Fixture form: cells as [z_1, .., z_d, value] rows in lexicographic order.
    pub fn to_fixture(&self) -> FieldFixture {
        FieldFixture {
            dim: self.dim,
            law: self.law.clone(),
            master_seed: self.master_seed,
            extent: self.extent.clone(),
            cells: self
                .cells
                .iter()
                .map(|(z, &v)| {
                    let mut row: Vec<f64> = z.iter().map(|&c| c as f64).collect();
                    row.push(v);
                    row
                })
                .collect(),
        }
    }

    pub fn from_fixture(fx: &FieldFixture) -> Result<Self, FieldError> {
        fx.law.validate()?;
        let mut cells = BTreeMap::new();
        for row in &fx.cells {
            if row.len() != fx.dim + 1 {
                return Err(FieldError::Fixture(format!(
                    "cell row has {} entries, expected {}",
                    row.len(),
                    fx.dim + 1
                )));
            }
            let z: Vec<i64> = row[..fx.dim].iter().map(|&c| c as i64).collect();
            cells.insert(z, row[fx.dim]);
        }
        Ok(CheckerboardField {
            dim: fx.dim,
            law: fx.law.clone(),
            master_seed: fx.master_seed,
            shift: vec![0; fx.dim],
            extent: fx.extent.clone(),
            cells,
        })
    }
}

/// JSON-facing snapshot of a sampled field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldFixture {
    pub dim: usize,
    pub law: MarginalLaw,
    pub master_seed: u64,
    pub extent: TriadicCube,
    pub cells: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> MarginalLaw {
        MarginalLaw::TwoPoint { lo: 1.0, hi: 4.0, p_hi: 0.5 }
    }

    #[test]
    fn cube_cells_and_children() {
        let c = TriadicCube::centered(1, 2);
        let cells = c.cells();
        assert_eq!(cells.len(), 9);
        assert_eq!(cells[0], vec![-1, -1]);
        assert_eq!(cells[8], vec![1, 1]);
        let kids = c.children(0);
        assert_eq!(kids.len(), 9);
        assert!(kids.iter().all(|k| c.contains_cube(k)));
        let c2 = TriadicCube::centered(2, 2);
        let kids1 = c2.children(1);
        assert_eq!(kids1.len(), 9);
        assert_eq!(kids1[0].offset, vec![-3, -3]);
        assert!(kids1.iter().all(|k| c2.contains_cube(k)));
        assert!(!c.contains_cube(&c2));
    }

    #[test]
    fn constant_law_fills_cells() {
        let f = CheckerboardField::sample(
            MarginalLaw::Constant { value: 2.5 },
            2,
            7,
            TriadicCube::centered(1, 2),
        )
        .unwrap();
        for z in TriadicCube::centered(1, 2).cells() {
            assert_eq!(f.value_at_cell(&z).unwrap(), 2.5);
            let m = f.coeff_at_cell(&z).unwrap();
            assert_eq!(m.a11, 2.5);
            assert_eq!(m.a22, 2.5);
            assert_eq!(m.a12, 0.0);
        }
    }

    #[test]
    fn reproducible_and_extension_stable() {
        let ext = TriadicCube::centered(1, 2);
        let f1 = CheckerboardField::sample(two_point(), 2, 42, ext.clone()).unwrap();
        let f2 = CheckerboardField::sample(two_point(), 2, 42, ext.clone()).unwrap();
        assert_eq!(f1.cell_table(), f2.cell_table());

        // enlarging the window keeps old cells bit-identical
        let mut f3 = f1.clone();
        f3.ensure_cover(&TriadicCube::centered(2, 2));
        for (z, v) in f1.cell_table() {
            assert_eq!(f3.value_at_cell(z).unwrap(), *v);
        }
        // and matches sampling the large window directly
        let f4 = CheckerboardField::sample(two_point(), 2, 42, TriadicCube::centered(2, 2))
            .unwrap();
        assert_eq!(f3.cell_table(), f4.cell_table());
    }

    #[test]
    fn different_seeds_differ() {
        let ext = TriadicCube::centered(2, 2);
        let f1 = CheckerboardField::sample(two_point(), 2, 1, ext.clone()).unwrap();
        let f2 = CheckerboardField::sample(two_point(), 2, 2, ext).unwrap();
        assert_ne!(f1.cell_table(), f2.cell_table());
    }

    #[test]
    fn eval_is_piecewise_constant() {
        let f = CheckerboardField::sample(two_point(), 2, 9, TriadicCube::centered(1, 2))
            .unwrap();
        for z in TriadicCube::centered(1, 2).cells() {
            let v = f.value_at_cell(&z).unwrap();
            for probe in [[-0.4, 0.1], [0.0, 0.0], [0.3, -0.45]] {
                let x = [z[0] as f64 + probe[0], z[1] as f64 + probe[1]];
                assert_eq!(f.eval(&x).unwrap(), v);
            }
        }
        assert!(f.eval(&[10.0, 0.0]).is_err());
    }

    #[test]
    fn shift_identity_and_group_law() {
        let f = CheckerboardField::sample(two_point(), 2, 11, TriadicCube::centered(2, 2))
            .unwrap();
        let id = f.shifted(&[0, 0]);
        assert_eq!(f.cell_table(), id.cell_table());

        let a = f.shifted(&[1, -2]).shifted(&[-3, 1]);
        let b = f.shifted(&[-2, -1]);
        assert_eq!(a.cell_table(), b.cell_table());

        // pointwise: (T_z a)(x) = a(x + z) at 100 probe points
        let g = f.shifted(&[2, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4)];
            let shifted_x = [x[0] + 2.0, x[1] + 1.0];
            assert_eq!(g.eval(&x).unwrap(), f.eval(&shifted_x).unwrap());
        }
    }

    #[test]
    fn extremes_monotone_and_shift_consistent() {
        let f = CheckerboardField::sample(two_point(), 2, 3, TriadicCube::centered(2, 2))
            .unwrap();
        let small = TriadicCube::centered(1, 2);
        let big = TriadicCube::centered(2, 2);
        let (l0, u0) = f.lambda_extremes(&small).unwrap();
        let (l1, u1) = f.lambda_extremes(&big).unwrap();
        assert!(l1 <= l0 && u1 >= u0);

        // extremes of the shifted field over the centered cube equal extremes
        // of the original over the shifted cube
        let z = [1i64, -1];
        let g = f.shifted(&z);
        let (gl, gu) = g.lambda_extremes(&small).unwrap();
        let (fl, fu) = f.lambda_extremes(&small.translated(&z)).unwrap();
        assert_eq!((gl, gu), (fl, fu));
    }

    #[test]
    fn two_point_moments_exact() {
        let law = two_point();
        assert_eq!(law.mean().unwrap(), 2.5);
        assert_eq!(law.mean_reciprocal().unwrap(), 0.625);
        let eff = law.closed_form_effective(1).unwrap();
        assert!((eff.a11 - 1.6).abs() < 1e-15);
        let eff2 = law.closed_form_effective(2).unwrap();
        assert!((eff2.a11 - 2.0).abs() < 1e-15);
    }

    #[test]
    fn log_uniform_moments_match_closed_form() {
        let law = MarginalLaw::BoundedLogUniform { spread: 1.0 };
        // E[b] = (e - 1/e)/2, E[1/b] identical by symmetry
        let exact = (1.0f64.exp() - (-1.0f64).exp()) / 2.0;
        assert!((law.mean().unwrap() - exact).abs() < 1e-10);
        assert!((law.mean_reciprocal().unwrap() - exact).abs() < 1e-10);
        assert_eq!(law.closed_form_effective(2).unwrap().a11, 1.0);
    }

    #[test]
    fn weibull_moments_match_monte_carlo() {
        let law =
            MarginalLaw::WeibullTail { k_upper: 6.0, k_lower: 6.0, floor: 0.5, scale: 0.5 };
        law.validate().unwrap();
        let mean_q = law.mean().unwrap();
        let minv_q = law.mean_reciprocal().unwrap();
        let n = 200_000u64;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut s, mut si, mut s2, mut si2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let b = law.draw(&mut rng);
            s += b;
            si += 1.0 / b;
            s2 += b * b;
            si2 += 1.0 / (b * b);
        }
        let nf = n as f64;
        let (m, mi) = (s / nf, si / nf);
        let se = ((s2 / nf - m * m) / nf).sqrt();
        let sei = ((si2 / nf - mi * mi) / nf).sqrt();
        assert!((m - mean_q).abs() < 4.0 * se, "mean {m} vs quadrature {mean_q}");
        assert!((mi - minv_q).abs() < 4.0 * sei, "1/b mean {mi} vs quadrature {minv_q}");
    }

    #[test]
    fn exp_moment_divergence_detected() {
        let law =
            MarginalLaw::WeibullTail { k_upper: 3.0, k_lower: 6.0, floor: 0.5, scale: 0.5 };
        assert!(law.exp_moment(4.0).is_err());
        assert!(law.exp_moment(1.0).is_ok());
    }

    #[test]
    fn fixture_roundtrip() {
        let f = CheckerboardField::sample(two_point(), 2, 42, TriadicCube::centered(2, 2))
            .unwrap();
        let fx = f.to_fixture();
        let json = serde_json::to_string(&fx).unwrap();
        let back: FieldFixture = serde_json::from_str(&json).unwrap();
        let g = CheckerboardField::from_fixture(&back).unwrap();
        assert_eq!(f.cell_table(), g.cell_table());
    }

    #[test]
    fn law_validation_rejects_bad_parameters() {
        assert!(MarginalLaw::Constant { value: 0.0 }.validate().is_err());
        assert!(MarginalLaw::TwoPoint { lo: 4.0, hi: 1.0, p_hi: 0.5 }.validate().is_err());
        assert!(MarginalLaw::TwoPoint { lo: 1.0, hi: 4.0, p_hi: 1.5 }.validate().is_err());
        assert!(MarginalLaw::BoundedLogUniform { spread: -1.0 }.validate().is_err());
        assert!(MarginalLaw::WeibullTail {
            k_upper: 6.0,
            k_lower: 6.0,
            floor: 0.0,
            scale: 0.5
        }
        .validate()
        .is_err());
    }
}
