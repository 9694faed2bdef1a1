//! Small dense linear-algebra helpers shared by the dichotomy and shadowing modules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Norm on the state space.
///
/// `BlockSum { block }` is the product norm `|(x1, .., xk)| = |x1| + .. + |xk|` over Euclidean
/// blocks of size `block`; the companion lift of second-order equations lives in this norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Norm {
    #[default]
    Euclidean,
    BlockSum {
        block: usize,
    },
}

impl Norm {
    pub fn vector(&self, v: &DVector<f64>) -> f64 {
        match *self {
            Norm::Euclidean => v.norm(),
            Norm::BlockSum { block } => {
                v.as_slice().chunks(block.max(1)).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).sum()
            }
        }
    }

    /// Induced operator norm.
    ///
    /// Exact for `Euclidean` (largest singular value) and for `BlockSum { block: 1 }`
    /// (maximum absolute column sum). For wider blocks the value is the upper bound
    /// `max_j sum_i ||M_ij||_2`, which keeps every certificate built on it sound.
    pub fn operator(&self, m: &DMatrix<f64>) -> f64 {
        if m.nrows() == 0 || m.ncols() == 0 {
            return 0.0;
        }
        match *self {
            Norm::Euclidean => spectral_norm(m),
            Norm::BlockSum { block } => {
                let b = block.max(1);
                if b == 1 {
                    return (0..m.ncols())
                        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
                        .fold(0.0, f64::max);
                }
                let nb = m.ncols() / b;
                let mut worst = 0.0_f64;
                for j in 0..nb {
                    let mut s = 0.0;
                    for i in 0..m.nrows() / b {
                        let blk = m.view((i * b, j * b), (b, b)).clone_owned();
                        s += spectral_norm(&blk);
                    }
                    worst = worst.max(s);
                }
                worst
            }
        }
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.iter().any(|x| !x.is_finite()) {
        return f64::INFINITY;
    }
    if is_diagonal(m) {
        return m.diagonal().iter().map(|x| x.abs()).fold(0.0, f64::max);
    }
    m.clone().svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max)
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.iter().enumerate().all(|(k, &x)| x == 0.0 || k % m.nrows() == k / m.nrows())
}

/// The three complementary projections attached to one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub p3: DMatrix<f64>,
}

/// Which of the three invariant fibers a vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fiber {
    Stable,
    Unstable,
    Center,
}

impl Fiber {
    pub fn name(&self) -> &'static str {
        match self {
            Fiber::Stable => "stable",
            Fiber::Unstable => "unstable",
            Fiber::Center => "center",
        }
    }
}

impl Projections {
    pub fn new(p1: DMatrix<f64>, p2: DMatrix<f64>, p3: DMatrix<f64>) -> Self {
        Self { p1, p2, p3 }
    }

    /// Coordinate projections onto the first `ns` axes, the next `nu` axes, and the rest.
    pub fn coordinate(dim: usize, ns: usize, nu: usize) -> Self {
        let diag = |lo: usize, hi: usize| {
            DMatrix::from_fn(dim, dim, |i, j| if i == j && i >= lo && i < hi { 1.0 } else { 0.0 })
        };
        Self::new(diag(0, ns), diag(ns, ns + nu), diag(ns + nu, dim))
    }

    pub fn dim(&self) -> usize {
        self.p1.nrows()
    }

    pub fn get(&self, fiber: Fiber) -> &DMatrix<f64> {
        match fiber {
            Fiber::Stable => &self.p1,
            Fiber::Unstable => &self.p2,
            Fiber::Center => &self.p3,
        }
    }

    pub fn all(&self) -> [&DMatrix<f64>; 3] {
        [&self.p1, &self.p2, &self.p3]
    }

    /// `Q P Q^{-1}` for each projection.
    pub fn conjugate(&self, q: &DMatrix<f64>, q_inv: &DMatrix<f64>) -> Self {
        Self::new(q * &self.p1 * q_inv, q * &self.p2 * q_inv, q * &self.p3 * q_inv)
    }

    /// Worst defect of the projection algebra in the Euclidean operator norm:
    /// `P1 + P2 + P3 = I`, `Pi Pj = 0` for `i != j`, `Pi^2 = Pi`.
    pub fn algebra_defect(&self) -> f64 {
        let n = self.dim();
        let id = DMatrix::<f64>::identity(n, n);
        let ps = self.all();
        let mut worst = spectral_norm(&(ps[0] + ps[1] + ps[2] - &id));
        for i in 0..3 {
            for j in 0..3 {
                let prod = ps[i] * ps[j];
                let d = if i == j { spectral_norm(&(prod - ps[i])) } else { spectral_norm(&prod) };
                worst = worst.max(d);
            }
        }
        worst
    }
}

/// Numerical rank of a projection, read off its trace.
pub fn projection_rank(p: &DMatrix<f64>) -> usize {
    p.trace().round().max(0.0) as usize
}

/// Moore–Penrose pseudo-inverse of a matrix of numerical rank `rank`.
///
/// Returns the pseudo-inverse together with `sigma_rank / sigma_1` (zero for an empty rank).
pub fn truncated_pinv(m: &DMatrix<f64>, rank: usize) -> (DMatrix<f64>, f64) {
    let (r, c) = m.shape();
    let keep = rank.min(r.min(c));
    if keep == 0 {
        return (DMatrix::zeros(c, r), 1.0);
    }
    // singular values alone are reliable here; nalgebra's singular vectors are not for
    // rank-deficient input, so the inverse goes through a complete orthogonal decomposition
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let (smax, smin) = (sv[0], sv[keep - 1]);
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(smin > 0.0) {
        return (DMatrix::zeros(c, r), ratio);
    }
    // M P = Q R, so M = Q_k C with C = R_k P^T; then C^T = Z T and M = Q_k T^T Z^T
    let qr = m.clone().col_piv_qr();
    let q = qr.q().columns(0, keep).into_owned();
    let mut cm = qr.r().rows(0, keep).into_owned();
    qr.p().inv_permute_columns(&mut cm);
    let qr2 = cm.transpose().qr();
    let z = qr2.q();
    let t = qr2.r();
    let w = t
        .transpose()
        .solve_lower_triangular(&q.transpose())
        .expect("triangular factor is nonsingular for nonzero singular values");
    (z * w, ratio)
}

/// A unit vector spanning the range of a rank-one projection.
pub fn range_direction(p: &DMatrix<f64>) -> Option<DVector<f64>> {
    let (mut best, mut best_norm) = (0, 0.0);
    for j in 0..p.ncols() {
        let n = p.column(j).norm();
        if n > best_norm {
            best = j;
            best_norm = n;
        }
    }
    (best_norm > 0.0).then(|| p.column(best).into_owned() / best_norm)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Row-major dense matrix from a flat slice.
pub fn from_row_major(n: usize, data: &[f64]) -> Option<DMatrix<f64>> {
    (data.len() == n * n).then(|| DMatrix::from_row_slice(n, n, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_norm_scalar_blocks_is_l1() {
        let n = Norm::BlockSum { block: 1 };
        let v = DVector::from_vec(vec![3.0, -4.0]);
        assert_eq!(n.vector(&v), 7.0);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(n.operator(&m), 4.0);
    }

    #[test]
    fn spectral_norm_of_rotation_is_one() {
        let (s, c) = (0.3_f64.sin(), 0.3_f64.cos());
        let m = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert!((spectral_norm(&m) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn coordinate_projections_are_exact() {
        let p = Projections::coordinate(3, 1, 1);
        assert_eq!(p.algebra_defect(), 0.0);
        assert_eq!(projection_rank(&p.p2), 1);
    }

    #[test]
    fn pinv_inverts_on_range() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 4.0]);
        let (pi, ratio) = truncated_pinv(&m, 1);
        assert!((pi[(1, 1)] - 0.25).abs() < 1e-15);
        assert!(pi[(0, 0)].abs() < 1e-15);
        assert_eq!(ratio, 1.0);
    }

    #[test]
    fn pinv_of_rank_deficient_product() {
        // rank two, 4x4, with no structure a coordinate guess could exploit
        let b = DMatrix::from_row_slice(4, 2, &[1.0, 0.3, -0.2, 2.0, 0.7, -1.1, 0.4, 0.5]);
        let c = DMatrix::from_row_slice(2, 4, &[0.9, -0.4, 1.3, 0.2, 0.1, 1.7, -0.6, 0.8]);
        let m = &b * &c;
        let (pi, ratio) = truncated_pinv(&m, 2);
        assert!(ratio > 0.0);
        assert!((&m * &pi * &m - &m).amax() < 1e-12);
        assert!((&pi * &m * &pi - &pi).amax() < 1e-12);
        let mp = &m * &pi;
        assert!((&mp - mp.transpose()).amax() < 1e-12);
        let pm = &pi * &m;
        assert!((&pm - pm.transpose()).amax() < 1e-12);
    }
}
