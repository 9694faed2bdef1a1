//! Discrete cocycles `A(m, n) = A_{m-1} ... A_n`, projection fields, and certification of the
//! discrete dichotomy estimates on a finite window.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{exact_ratio, Certificate, Check, Worst};
use crate::error::{Error, Result};
use crate::linalg::{projection_rank, truncated_pinv, Norm, Projections};
use crate::rates::RateSequence;

pub type MatrixSeqFn = Arc<dyn Fn(usize) -> DMatrix<f64> + Send + Sync>;
pub type ProjectionSeqFn = Arc<dyn Fn(usize) -> Projections + Send + Sync>;

/// Tolerance on the projection algebra.
pub const PROJECTION_TOL: f64 = 1e-10;
/// Relative tolerance of the equivariance check.
pub const EQUIVARIANCE_TOL: f64 = 1e-8;
/// Smallest admissible `sigma_min / sigma_max` of a restricted unstable block.
pub const SINGULAR_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DichotomyConstants {
    #[serde(rename = "D")]
    pub big_d: f64,
    pub lambda: f64,
    pub d: f64,
}

impl DichotomyConstants {
    pub fn new(big_d: f64, lambda: f64, d: f64) -> Result<Self> {
        if !(big_d > 0.0 && big_d.is_finite()) || !(lambda > 0.0 && lambda.is_finite()) || !(d >= 0.0 && d.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "dichotomy constants need D > 0, lambda > 0, d >= 0; got D = {big_d}, lambda = {lambda}, d = {d}"
            )));
        }
        Ok(Self { big_d, lambda, d })
    }
}

#[derive(Clone)]
pub struct DiscreteCocycle {
    dim: usize,
    horizon: usize,
    mats: Vec<DMatrix<f64>>,
    generator: Option<MatrixSeqFn>,
    pub norm: Norm,
}

impl fmt::Debug for DiscreteCocycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteCocycle")
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("generator", &self.generator.is_some())
            .field("norm", &self.norm)
            .finish()
    }
}

impl DiscreteCocycle {
    /// Cocycle from explicit matrices `A_0, .., A_{N-1}`.
    pub fn from_matrices(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let dim = mats.first().map(|m| m.nrows()).ok_or_else(|| Error::InvalidInput("empty matrix sequence".into()))?;
        for (n, m) in mats.iter().enumerate() {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "A_{n} is {}x{}, expected {dim}x{dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("A_{n} has non-finite entries")));
            }
        }
        Ok(Self { dim, horizon: mats.len(), mats, generator: None, norm: Norm::Euclidean })
    }

    /// Cocycle backed by a generator valid for every index, cached on `[0, N)`.
    pub fn from_generator(
        horizon: usize,
        generator: impl Fn(usize) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        let generator: MatrixSeqFn = Arc::new(generator);
        let mut c = Self::from_matrices((0..horizon.max(1)).map(|n| generator(n)).collect())?;
        c.mats.truncate(horizon);
        c.horizon = horizon;
        c.generator = Some(generator);
        Ok(c)
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn matrix(&self, n: usize) -> &DMatrix<f64> {
        &self.mats[n]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    pub fn has_generator(&self) -> bool {
        self.generator.is_some()
    }

    /// Same cocycle on a longer window. Requires a generator.
    pub fn extended(&self, horizon: usize) -> Result<Self> {
        if horizon <= self.horizon {
            let mut c = self.clone();
            c.mats.truncate(horizon);
            c.horizon = horizon;
            return Ok(c);
        }
        let g = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("cocycle given by explicit matrices cannot be extended".into()))?;
        let mut c = self.clone();
        c.mats.extend((self.horizon..horizon).map(|n| g(n)));
        c.horizon = horizon;
        Ok(c)
    }
}

/// `A(m, n)` for `n <= m <= N`.
pub fn propagate(c: &DiscreteCocycle, m: usize, n: usize) -> Result<DMatrix<f64>> {
    if n > m || m > c.horizon {
        return Err(Error::IndexOutOfRange(format!(
            "propagate needs 0 <= n <= m <= {}, got m = {m}, n = {n}",
            c.horizon
        )));
    }
    let mut out = DMatrix::identity(c.dim, c.dim);
    for k in n..m {
        out = &c.mats[k] * out;
    }
    Ok(out)
}

#[derive(Clone)]
pub struct ProjectionField {
    nodes: Vec<Projections>,
    generator: Option<ProjectionSeqFn>,
}

impl fmt::Debug for ProjectionField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProjectionField").field("len", &self.nodes.len()).finish()
    }
}

impl ProjectionField {
    /// Explicit projections at `0..=N`.
    pub fn from_nodes(nodes: Vec<Projections>) -> Result<Self> {
        let dim = nodes.first().map(|p| p.dim()).ok_or_else(|| Error::InvalidInput("empty projection field".into()))?;
        for (n, p) in nodes.iter().enumerate() {
            if p.all().iter().any(|m| m.nrows() != dim || m.ncols() != dim) {
                return Err(Error::ShapeMismatch(format!("projections at node {n} are not {dim}x{dim}")));
            }
        }
        Ok(Self { nodes, generator: None })
    }

    pub fn constant(p: Projections, horizon: usize) -> Self {
        let q = p.clone();
        Self { nodes: vec![p; horizon + 1], generator: Some(Arc::new(move |_| q.clone())) }
    }

    pub fn from_generator(horizon: usize, generator: impl Fn(usize) -> Projections + Send + Sync + 'static) -> Self {
        let generator: ProjectionSeqFn = Arc::new(generator);
        Self { nodes: (0..=horizon).map(|n| generator(n)).collect(), generator: Some(generator) }
    }

    pub fn at(&self, n: usize) -> &Projections {
        &self.nodes[n]
    }

    pub fn horizon(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[Projections] {
        &self.nodes
    }

    pub fn extended(&self, horizon: usize) -> Result<Self> {
        if horizon <= self.horizon() {
            return Ok(Self { nodes: self.nodes[..=horizon].to_vec(), generator: self.generator.clone() });
        }
        let g = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("explicit projection field cannot be extended".into()))?;
        let mut nodes = self.nodes.clone();
        nodes.extend((self.horizon() + 1..=horizon).map(|n| g(n)));
        Ok(Self { nodes, generator: self.generator.clone() })
    }

    /// Replaces the projections at one index. Used to build broken fields in tests.
    pub fn set(&mut self, n: usize, p: Projections) {
        self.nodes[n] = p;
        self.generator = None;
    }

    /// Projection algebra at every node.
    pub fn check_algebra(&self) -> Check {
        let mut w = Worst::new();
        for (n, p) in self.nodes.iter().enumerate() {
            w.update(p.algebra_defect(), n);
        }
        let mut c = Check::new("projection algebra", w.value, w.value <= PROJECTION_TOL)
            .with_detail("worst operator-norm defect");
        if let Some(n) = w.at {
            c = c.at(format!("n = {n}"));
        }
        c
    }
}

/// Linear data of a discrete dichotomy.
#[derive(Debug, Clone)]
pub struct DiscreteDichotomy {
    pub cocycle: DiscreteCocycle,
    pub projections: ProjectionField,
    pub rates: RateSequence,
    pub constants: DichotomyConstants,
}

impl DiscreteDichotomy {
    pub fn new(
        cocycle: DiscreteCocycle,
        projections: ProjectionField,
        rates: RateSequence,
        constants: DichotomyConstants,
    ) -> Result<Self> {
        let n = cocycle.horizon();
        if projections.horizon() != n {
            return Err(Error::ShapeMismatch(format!(
                "projection field covers [0, {}], cocycle covers [0, {n}]",
                projections.horizon()
            )));
        }
        if projections.at(0).dim() != cocycle.dim() {
            return Err(Error::ShapeMismatch("projection and cocycle dimensions differ".into()));
        }
        if rates.horizon < n {
            return Err(Error::ShapeMismatch(format!("rates cover [0, {}], need [0, {n}]", rates.horizon)));
        }
        rates.check_denominators(constants.lambda)?;
        Ok(Self { cocycle, projections, rates, constants })
    }

    pub fn horizon(&self) -> usize {
        self.cocycle.horizon()
    }

    pub fn dim(&self) -> usize {
        self.cocycle.dim()
    }

    pub fn norm(&self) -> Norm {
        self.cocycle.norm
    }

    pub fn can_extend(&self) -> bool {
        self.cocycle.has_generator() && self.rates.is_formula()
    }

    pub fn extended(&self, horizon: usize) -> Result<Self> {
        Self::new(
            self.cocycle.extended(horizon)?,
            self.projections.extended(horizon)?,
            self.rates.extended(horizon)?,
            self.constants,
        )
    }

    /// One-step pullbacks `A(n, n+1)` on the unstable fibers, `n = 0..N-1`.
    pub fn step_pullbacks(&self) -> Result<Vec<DMatrix<f64>>> {
        (0..self.horizon())
            .into_par_iter()
            .map(|n| unstable_pullback(&self.cocycle, &self.projections, n, n + 1))
            .collect()
    }
}

/// `A(m, n)` for `m <= n` as an operator on `Im P2_n`, extended by zero on the other fibers.
pub fn unstable_pullback(c: &DiscreteCocycle, p: &ProjectionField, m: usize, n: usize) -> Result<DMatrix<f64>> {
    if m > n || n > c.horizon() || n > p.horizon() {
        return Err(Error::IndexOutOfRange(format!(
            "unstable_pullback needs 0 <= m <= n <= {}, got m = {m}, n = {n}",
            c.horizon()
        )));
    }
    let (p2m, p2n) = (&p.at(m).p2, &p.at(n).p2);
    if m == n {
        return Ok(p2n.clone());
    }
    let rank = projection_rank(p2n);
    if rank == 0 {
        return Ok(DMatrix::zeros(c.dim(), c.dim()));
    }
    let block = p2n * propagate(c, n, m)? * p2m;
    let (pinv, r) = truncated_pinv(&block, rank);
    if !(r >= SINGULAR_RATIO) {
        return Err(Error::SingularUnstableBlock { from: m, to: n, ratio: r });
    }
    Ok(p2m * pinv * p2n)
}

/// `||A_n P^i_n - P^i_{n+1} A_n|| <= 1e-8 max(1, ||A_n||)` for every step and fiber.
pub fn check_equivariance(c: &DiscreteCocycle, p: &ProjectionField) -> Certificate {
    let n_max = c.horizon().min(p.horizon());
    let mut cert = Certificate::new(format!("n in [0, {n_max}) (finite horizon)"));
    cert.push(p.check_algebra());
    for (i, name) in ["P1", "P2", "P3"].iter().enumerate() {
        let w = (0..n_max)
            .into_par_iter()
            .map(|n| {
                let a = c.matrix(n);
                let (pn, pn1) = (p.at(n).all()[i], p.at(n + 1).all()[i]);
                let defect = c.norm.operator(&(a * pn - pn1 * a));
                let mut w = Worst::new();
                w.update(defect / c.norm.operator(a).max(1.0), n);
                w
            })
            .reduce(Worst::new, Worst::merge);
        let mut check = Check::new(format!("equivariance {name}"), w.value, w.value <= EQUIVARIANCE_TOL)
            .with_detail("||A P - P A|| / max(1, ||A||)");
        if let Some(n) = w.at {
            check = check.at(format!("n = {n}"));
        }
        cert.push(check);
    }
    cert
}

/// Ratio `||A(m, n) P_n|| / (D (mu ratio)^{-lambda} nu_n^d)` over one family of index pairs.
/// `stable` selects `m >= n` with the forward cocycle, otherwise `m <= n` with pullbacks.
fn dichotomy_ratios(
    c: &DiscreteCocycle,
    p: &ProjectionField,
    pullbacks: &[DMatrix<f64>],
    rates: &RateSequence,
    lambda: f64,
    d: f64,
    stable: bool,
) -> Vec<Vec<f64>> {
    let big_n = c.horizon();
    (0..=big_n)
        .into_par_iter()
        .map(|n| {
            let nu_d = rates.nu(n).powf(d);
            let mu_n = rates.mu(n).powf(lambda);
            let mut row = Vec::new();
            if stable {
                let mut x = p.at(n).p1.clone();
                for m in n..=big_n {
                    let bound = (rates.mu(m).powf(lambda) / mu_n).recip() * nu_d;
                    row.push(exact_ratio(c.norm.operator(&x), bound));
                    if m < big_n {
                        x = &p.at(m + 1).p1 * c.matrix(m) * x;
                    }
                }
            } else {
                let mut x = p.at(n).p2.clone();
                for m in (0..=n).rev() {
                    let bound = (mu_n / rates.mu(m).powf(lambda)).recip() * nu_d;
                    row.push(exact_ratio(c.norm.operator(&x), bound));
                    if m > 0 {
                        x = &pullbacks[m - 1] * x;
                    }
                }
            }
            row
        })
        .collect()
}

fn worst_of(rows: &[Vec<f64>], stable: bool) -> Worst<(usize, usize)> {
    let mut w = Worst::new();
    for (n, row) in rows.iter().enumerate() {
        for (k, &r) in row.iter().enumerate() {
            let m = if stable { n + k } else { n - k };
            w.update(r, (m, n));
        }
    }
    w
}

fn pair_check(name: &str, w: Worst<(usize, usize)>, scale: f64) -> Check {
    let mut c = Check::ratio(name, w.value / scale);
    if let Some((m, n)) = w.at {
        c = c.at(format!("(m, n) = ({m}, {n})"));
    }
    c
}

/// Checks both dichotomy estimates on every admissible index pair of `[0, N]`.
pub fn certify_dichotomy(
    c: &DiscreteCocycle,
    p: &ProjectionField,
    rates: &RateSequence,
    k: &DichotomyConstants,
) -> Result<Certificate> {
    let pullbacks =
        (0..c.horizon()).into_par_iter().map(|n| unstable_pullback(c, p, n, n + 1)).collect::<Result<Vec<_>>>()?;
    let mut cert = check_equivariance(c, p);
    cert.checked_window = format!("0 <= n, m <= {} (finite horizon)", c.horizon());
    let stable = worst_of(&dichotomy_ratios(c, p, &pullbacks, rates, k.lambda, k.d, true), true);
    let unstable = worst_of(&dichotomy_ratios(c, p, &pullbacks, rates, k.lambda, k.d, false), false);
    cert.push(pair_check("stable dichotomy estimate", stable, k.big_d));
    cert.push(pair_check("unstable dichotomy estimate", unstable, k.big_d));
    cert.flag(format!("finite horizon: estimates certified on [0, {}] only", c.horizon()));
    Ok(cert)
}

/// Least `D` for which [`certify_dichotomy`] passes with the given `lambda` and `d`.
///
/// Fails with `NoFiniteD` when the ratios are not finite, or when the largest ratio per index gap
/// is still growing over the second half of the window and has at least doubled there.
pub fn fit_min_d(c: &DiscreteCocycle, p: &ProjectionField, rates: &RateSequence, lambda: f64, d: f64) -> Result<f64> {
    let pullbacks =
        (0..c.horizon()).into_par_iter().map(|n| unstable_pullback(c, p, n, n + 1)).collect::<Result<Vec<_>>>()?;
    let big_n = c.horizon();
    let mut by_gap = vec![0.0_f64; big_n + 1];
    for stable in [true, false] {
        for row in dichotomy_ratios(c, p, &pullbacks, rates, lambda, d, stable) {
            for (k, r) in row.into_iter().enumerate() {
                if r.is_nan() {
                    by_gap[k] = f64::NAN;
                } else {
                    by_gap[k] = by_gap[k].max(r);
                }
            }
        }
    }
    if by_gap.iter().any(|r| !r.is_finite()) {
        return Err(Error::NoFiniteD("dichotomy ratios are not finite on the window".into()));
    }
    let half = big_n / 2;
    if big_n >= 8 {
        let tail = &by_gap[half..];
        let growing = tail.windows(2).all(|w| w[1] > w[0]);
        if growing && tail[tail.len() - 1] >= 2.0 * tail[0] && tail[0] > 0.0 {
            return Err(Error::NoFiniteD(format!(
                "largest ratio grows from {:e} to {:e} across index gaps {half}..{big_n}",
                tail[0],
                tail[tail.len() - 1]
            )));
        }
    }
    let fitted = by_gap.into_iter().fold(0.0, f64::max);
    if fitted <= 0.0 {
        // Only possible when both stable and unstable fibers are trivial.
        return Ok(1.0);
    }
    Ok(fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::{make_rate, sample_rate, RateKind, RateParams};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag2(a: f64, b: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![a, b]))
    }

    fn exp_rates(n: usize) -> RateSequence {
        sample_rate(&make_rate(RateKind::Exponential, &RateParams::default()).unwrap(), n).unwrap()
    }

    fn model(n: usize) -> (DiscreteCocycle, ProjectionField, RateSequence) {
        let c = DiscreteCocycle::from_generator(n, |_| diag2(0.5, 2.0)).unwrap();
        let p = ProjectionField::constant(Projections::coordinate(2, 1, 1), n);
        (c, p, exp_rates(n))
    }

    fn naive_product(mats: &[DMatrix<f64>], m: usize, n: usize) -> DMatrix<f64> {
        let dim = mats[0].nrows();
        let mut out = DMatrix::identity(dim, dim);
        let mut k = m;
        while k > n {
            k -= 1;
            out *= &mats[k];
        }
        out
    }

    #[test]
    fn propagate_identity_and_powers() {
        let (c, _, _) = model(8);
        assert_eq!(propagate(&c, 3, 3).unwrap(), DMatrix::identity(2, 2));
        assert_eq!(propagate(&c, 2, 0).unwrap(), diag2(0.25, 4.0));
        assert!(matches!(propagate(&c, 1, 2), Err(Error::IndexOutOfRange(_))));
        assert!(matches!(propagate(&c, 9, 0), Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn propagate_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mats: Vec<_> = (0..6).map(|_| DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0))).collect();
        let c = DiscreteCocycle::from_matrices(mats.clone()).unwrap();
        let diff = (propagate(&c, 4, 1).unwrap() - naive_product(&mats, 4, 1)).abs().max();
        assert!(diff < 1e-14);
    }

    #[test]
    fn pullback_examples() {
        let (c, p, _) = model(8);
        assert_eq!(unstable_pullback(&c, &p, 2, 2).unwrap(), p.at(2).p2);
        let m = unstable_pullback(&c, &p, 0, 3).unwrap();
        assert!((m - diag2(0.0, 0.125)).abs().max() < 1e-15);
    }

    #[test]
    fn pullback_detects_singular_block() {
        let c = DiscreteCocycle::from_matrices(vec![diag2(0.5, 0.0)]).unwrap();
        let p = ProjectionField::constant(Projections::coordinate(2, 1, 1), 1);
        assert!(matches!(unstable_pullback(&c, &p, 0, 1), Err(Error::SingularUnstableBlock { .. })));
    }

    #[test]
    fn equivariance_flags_swapped_index() {
        let (c, mut p, _) = model(6);
        assert!(check_equivariance(&c, &p).overall);
        p.set(3, Projections::new(p.at(3).p2.clone(), p.at(3).p1.clone(), p.at(3).p3.clone()));
        let cert = check_equivariance(&c, &p);
        assert!(!cert.overall);
        let bad = cert.check("equivariance P1").unwrap();
        assert!(!bad.pass);
        assert!(bad.worst_at.as_deref() == Some("n = 2") || bad.worst_at.as_deref() == Some("n = 3"));
    }

    #[test]
    fn diagonal_model_certifies_with_ratio_one() {
        let (c, p, r) = model(16);
        let k = DichotomyConstants::new(1.0, 2.0_f64.ln(), 0.0).unwrap();
        let cert = certify_dichotomy(&c, &p, &r, &k).unwrap();
        assert!(cert.overall, "{cert:?}");
        let w = cert.check("stable dichotomy estimate").unwrap().worst;
        assert!((w - 1.0).abs() < 1e-12);

        let tight = DichotomyConstants::new(1.0, 1.0, 0.0).unwrap();
        assert!(!certify_dichotomy(&c, &p, &r, &tight).unwrap().overall);
        let loose = DichotomyConstants::new(10.0, 2.0_f64.ln(), 0.0).unwrap();
        assert!(certify_dichotomy(&c, &p, &r, &loose).unwrap().overall);
    }

    #[test]
    fn fitted_d_examples() {
        let (c, p, r) = model(16);
        let l = 2.0_f64.ln();
        assert!((fit_min_d(&c, &p, &r, l, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((fit_min_d(&c, &p, &r, l / 2.0, 0.0).unwrap() - 1.0).abs() < 1e-12);

        let doubled = DiscreteCocycle::from_matrices(
            (0..16).map(|n| if n == 0 { diag2(1.0, 2.0) } else { diag2(0.5, 2.0) }).collect(),
        )
        .unwrap();
        assert!((fit_min_d(&doubled, &p, &r, l, 0.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fitted_d_is_least() {
        let (c, p, r) = model(12);
        let dd = fit_min_d(&c, &p, &r, 0.5, 0.0).unwrap();
        let pass = DichotomyConstants::new(dd, 0.5, 0.0).unwrap();
        let fail = DichotomyConstants::new(dd / (1.0 + 1e-6), 0.5, 0.0).unwrap();
        assert!(certify_dichotomy(&c, &p, &r, &pass).unwrap().overall);
        assert!(!certify_dichotomy(&c, &p, &r, &fail).unwrap().overall);
    }

    #[test]
    fn too_large_lambda_has_no_finite_d() {
        let (c, p, r) = model(32);
        assert!(matches!(fit_min_d(&c, &p, &r, 1.0, 0.0), Err(Error::NoFiniteD(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cocycle_law(seed in any::<u64>(), dim in 1usize..=6, big_n in 2usize..=32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mats: Vec<_> = (0..big_n)
                .map(|_| DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let c = DiscreteCocycle::from_matrices(mats).unwrap();
            let n = rng.random_range(0..=big_n);
            let m = rng.random_range(n..=big_n);
            let k = rng.random_range(n..=m);
            let lhs = propagate(&c, m, k).unwrap() * propagate(&c, k, n).unwrap();
            let rhs = propagate(&c, m, n).unwrap();
            let scale = rhs.abs().max().max(1e-300);
            prop_assert!((lhs - &rhs).abs().max() <= 1e-10 * scale.max(1.0));
        }

        #[test]
        fn pullback_inverts_on_unstable_fiber(seed in any::<u64>(), m in 0usize..6, gap in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = DMatrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
            let qi = q.clone().try_inverse().unwrap();
            let base = Projections::coordinate(2, 1, 1).conjugate(&q, &qi);
            let a = &q * diag2(0.4, 1.7) * &qi;
            let c = DiscreteCocycle::from_generator(10, move |_| a.clone()).unwrap();
            let p = ProjectionField::constant(base, 10);
            let n = m + gap;
            let back = unstable_pullback(&c, &p, m, n).unwrap();
            let fwd = propagate(&c, n, m).unwrap();
            let round_trip = &back * &fwd * &p.at(m).p2;
            prop_assert!((round_trip - &p.at(m).p2).abs().max() < 1e-8);
            let other = &fwd * &back * &p.at(n).p2;
            prop_assert!((other - &p.at(n).p2).abs().max() < 1e-8);
        }

        #[test]
        fn certificate_monotone_in_d(scale in 1.0f64..50.0, extra_d in 0.0f64..2.0) {
            let (c, p, r) = model(10);
            let k = DichotomyConstants::new(scale, 2.0_f64.ln(), extra_d).unwrap();
            prop_assert!(certify_dichotomy(&c, &p, &r, &k).unwrap().overall);
        }
    }
}
