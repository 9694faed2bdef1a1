//! Evolution families `T(t, s)` of `x' = A(t) x`, in closed form or integrated with RK4, and
//! certification of the continuous dichotomy estimates on a grid.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{exact_ratio, Certificate, Check, Worst};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Norm, Projections};
use crate::linear_discrete::{DichotomyConstants, PROJECTION_TOL};
use crate::rates::{default_grid, RatePair};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type PropagatorFn = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;
pub type ProjectionFn = Arc<dyn Fn(f64) -> Projections + Send + Sync>;

/// Tolerance of the composition-law self-check of integrated families.
pub const COMPOSITION_TOL: f64 = 1e-4;
/// Relative tolerance of the sampled continuous equivariance check.
pub const CONTINUOUS_EQUIVARIANCE_TOL: f64 = 1e-6;
/// Condition number above which `T(s, 0)` is not inverted and `T(t, s)` is re-integrated from `s`.
const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyMode {
    ClosedForm,
    Integrated,
}

struct IntegratedCache {
    h: f64,
    /// `T(k h, 0)`.
    nodes: Vec<DMatrix<f64>>,
    /// `T(k h, 0)^{-1}` when well conditioned.
    inverses: Vec<Option<DMatrix<f64>>>,
}

#[derive(Clone)]
enum Kind {
    Closed(PropagatorFn),
    Integrated(Arc<IntegratedCache>),
}

#[derive(Clone)]
pub struct EvolutionFamily {
    dim: usize,
    kind: Kind,
    a_eval: MatrixFn,
    pub norm: Norm,
    /// Worst relative defect of the composition law found when the family was integrated.
    pub self_check: Option<f64>,
}

impl fmt::Debug for EvolutionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvolutionFamily")
            .field("dim", &self.dim)
            .field("mode", &self.mode())
            .field("norm", &self.norm)
            .field("self_check", &self.self_check)
            .finish()
    }
}

impl EvolutionFamily {
    /// Family with a known propagator. `a_eval` must be its generator, `d/dt T(t, s) = A(t) T(t, s)`.
    pub fn closed_form(
        dim: usize,
        t_eval: impl Fn(f64, f64) -> DMatrix<f64> + Send + Sync + 'static,
        a_eval: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            kind: Kind::Closed(Arc::new(t_eval)),
            a_eval: Arc::new(a_eval),
            norm: Norm::Euclidean,
            self_check: None,
        }
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> FamilyMode {
        match self.kind {
            Kind::Closed(_) => FamilyMode::ClosedForm,
            Kind::Integrated(_) => FamilyMode::Integrated,
        }
    }

    /// Integration step of an integrated family.
    pub fn step(&self) -> Option<f64> {
        match &self.kind {
            Kind::Integrated(c) => Some(c.h),
            Kind::Closed(_) => None,
        }
    }

    pub fn a(&self, t: f64) -> DMatrix<f64> {
        (self.a_eval)(t)
    }

    pub fn a_fn(&self) -> MatrixFn {
        self.a_eval.clone()
    }

    /// `T(t, s)` for any `t, s >= 0`.
    pub fn t(&self, t: f64, s: f64) -> DMatrix<f64> {
        match &self.kind {
            Kind::Closed(f) => {
                if t == s {
                    DMatrix::identity(self.dim, self.dim)
                } else {
                    f(t, s)
                }
            }
            Kind::Integrated(cache) => self.integrated_t(cache, t, s),
        }
    }

    fn integrated_t(&self, cache: &IntegratedCache, t: f64, s: f64) -> DMatrix<f64> {
        if t == s {
            return DMatrix::identity(self.dim, self.dim);
        }
        let xs_inv = match node_index(cache, s) {
            Some(k) => cache.inverses[k].clone(),
            None => {
                let xs = self.propagate_from_zero(cache, s);
                invert_if_conditioned(&xs)
            }
        };
        match xs_inv {
            Some(inv) => self.propagate_from_zero(cache, t) * inv,
            None => rk4_propagate(&self.a_eval, self.dim, s, t, cache.h),
        }
    }

    /// `T(t, 0)` from the nearest cached node at or below `t` plus one partial step.
    fn propagate_from_zero(&self, cache: &IntegratedCache, t: f64) -> DMatrix<f64> {
        let k = ((t / cache.h).floor() as usize).min(cache.nodes.len() - 1);
        let tk = k as f64 * cache.h;
        let rem = t - tk;
        if rem.abs() <= 1e-14 * t.max(1.0) {
            return cache.nodes[k].clone();
        }
        rk4_step(&self.a_eval, tk, &cache.nodes[k], rem)
    }
}

fn node_index(cache: &IntegratedCache, t: f64) -> Option<usize> {
    let k = (t / cache.h).round();
    let exact = (k * cache.h - t).abs() <= 1e-12 * t.max(1.0);
    (exact && k >= 0.0 && (k as usize) < cache.nodes.len()).then_some(k as usize)
}

fn invert_if_conditioned(x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return None;
    }
    x.clone().try_inverse()
}

fn rk4_step(a: &MatrixFn, t: f64, x: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let k1 = a(t) * x;
    let k2 = a(t + h / 2.0) * (x + &k1 * (h / 2.0));
    let k3 = a(t + h / 2.0) * (x + &k2 * (h / 2.0));
    let k4 = a(t + h) * (x + &k3 * h);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates `X' = A(t) X`, `X(s) = I` from `s` to `t` (either direction) with steps of size `h`.
fn rk4_propagate(a: &MatrixFn, dim: usize, s: f64, t: f64, h: f64) -> DMatrix<f64> {
    let mut x = DMatrix::identity(dim, dim);
    let steps = ((t - s).abs() / h).ceil().max(1.0) as usize;
    let step = (t - s) / steps as f64;
    for k in 0..steps {
        x = rk4_step(a, s + k as f64 * step, &x, step);
    }
    x
}

/// Integrates `X' = A(t) X` with the classical fourth-order Runge-Kutta method on `[0, t_max]`.
pub fn integrate_family(
    a_eval: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    dim: usize,
    t_max: f64,
    h: f64,
) -> Result<EvolutionFamily> {
    if !(h > 0.0 && h.is_finite()) || !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "integrate_family needs h > 0 and t_max > 0, got h = {h}, t_max = {t_max}"
        )));
    }
    let a: MatrixFn = Arc::new(a_eval);
    let a0 = a(0.0);
    if a0.nrows() != dim || a0.ncols() != dim {
        return Err(Error::ShapeMismatch(format!("A(0) is {}x{}, expected {dim}x{dim}", a0.nrows(), a0.ncols())));
    }
    let steps = (t_max / h).ceil() as usize;
    let mut nodes = Vec::with_capacity(steps + 1);
    nodes.push(DMatrix::identity(dim, dim));
    for k in 0..steps {
        let next = rk4_step(&a, k as f64 * h, &nodes[k], h);
        nodes.push(next);
    }
    let inverses = nodes.par_iter().map(invert_if_conditioned).collect();
    let cache = Arc::new(IntegratedCache { h, nodes, inverses });

    // Composition law on triples with off-grid starting points, each factor integrated from
    // its own start, so that the three discretizations are genuinely different.
    let mut worst = 0.0_f64;
    for (fr, fs, ft) in [(0.0, 0.5, 1.0), (0.13, 0.41, 0.77), (0.5, 0.75, 0.99), (0.31, 0.32, 0.9)] {
        let (r, s, t) = (fr * t_max + h / 3.0, fs * t_max + h / 7.0, ft * t_max);
        let lhs = rk4_propagate(&a, dim, s, t, h) * rk4_propagate(&a, dim, r, s, h);
        let rhs = rk4_propagate(&a, dim, r, t, h);
        let scale = spectral_norm(&rhs).max(f64::MIN_POSITIVE);
        let defect = spectral_norm(&(lhs - &rhs)) / scale;
        worst = if defect.is_nan() { f64::NAN } else { worst.max(defect) };
    }
    if !(worst <= COMPOSITION_TOL) {
        return Err(Error::StepTooCoarse { defect: worst, tolerance: COMPOSITION_TOL });
    }
    Ok(EvolutionFamily {
        dim,
        kind: Kind::Integrated(cache),
        a_eval: a,
        norm: Norm::Euclidean,
        self_check: Some(worst),
    })
}

#[derive(Clone)]
pub struct ContinuousProjectionField {
    f: ProjectionFn,
}

impl fmt::Debug for ContinuousProjectionField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContinuousProjectionField").field("dim", &self.at(0.0).dim()).finish()
    }
}

impl ContinuousProjectionField {
    pub fn new(f: impl Fn(f64) -> Projections + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }

    pub fn constant(p: Projections) -> Self {
        Self::new(move |_| p.clone())
    }

    pub fn at(&self, t: f64) -> Projections {
        (self.f)(t)
    }
}

/// Linear data of a continuous dichotomy on `[0, t_max]`.
#[derive(Debug, Clone)]
pub struct ContinuousDichotomy {
    pub family: EvolutionFamily,
    pub projections: ContinuousProjectionField,
    pub rate: RatePair,
    pub constants: DichotomyConstants,
    pub t_max: f64,
}

impl ContinuousDichotomy {
    pub fn new(
        family: EvolutionFamily,
        projections: ContinuousProjectionField,
        rate: RatePair,
        constants: DichotomyConstants,
        t_max: f64,
    ) -> Result<Self> {
        if projections.at(0.0).dim() != family.dim() {
            return Err(Error::ShapeMismatch("projection and family dimensions differ".into()));
        }
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(Error::InvalidInput(format!("t_max must be positive, got {t_max}")));
        }
        Ok(Self { family, projections, rate, constants, t_max })
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn norm(&self) -> Norm {
        self.family.norm
    }

    /// Default certification grid: 200 points log-spaced in `1 + t` over `[0, t_max]`.
    pub fn default_grid(&self) -> Vec<f64> {
        default_grid(self.t_max, 200)
    }

    pub fn certify(&self, grid: &[f64]) -> Certificate {
        certify_dichotomy_continuous(&self.family, &self.projections, &self.rate, &self.constants, grid)
    }
}

/// Checks the projection algebra, sampled equivariance and both dichotomy estimates on all pairs
/// of grid points.
pub fn certify_dichotomy_continuous(
    family: &EvolutionFamily,
    projections: &ContinuousProjectionField,
    rate: &RatePair,
    k: &DichotomyConstants,
    grid: &[f64],
) -> Certificate {
    let window = match (grid.first(), grid.last()) {
        (Some(a), Some(b)) => format!("grid pairs in [{a}, {b}] ({} points)", grid.len()),
        _ => "empty grid".into(),
    };
    let mut cert = Certificate::new(window);
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) || grid[0] < 0.0 {
        cert.push(Check::new("grid sorted, non-empty, t >= 0", f64::NAN, false));
        return cert;
    }
    let norm = family.norm;
    let projs: Vec<Projections> = grid.iter().map(|&t| projections.at(t)).collect();

    let mut alg = Worst::new();
    for (i, p) in projs.iter().enumerate() {
        alg.update(p.algebra_defect(), i);
    }
    let mut c = Check::new("projection algebra", alg.value, alg.value <= PROJECTION_TOL)
        .with_detail("worst operator-norm defect");
    if let Some(i) = alg.at {
        c = c.at(format!("t = {}", grid[i]));
    }
    cert.push(c);

    type W = Worst<(usize, usize)>;
    let (eq, d1, d2) = (0..grid.len())
        .into_par_iter()
        .map(|j| {
            let s = grid[j];
            let ps = &projs[j];
            let (mut eq, mut d1, mut d2) = (W::new(), W::new(), W::new());
            let nu_d = rate.nu(s).powf(k.d);
            let mu_s = rate.mu(s);
            for (i, &t) in grid.iter().enumerate() {
                let tm = family.t(t, s);
                let pt = &projs[i];
                let scale = norm.operator(&tm).max(1.0);
                for (a, b) in ps.all().into_iter().zip(pt.all()) {
                    let defect = norm.operator(&(&tm * a - b * &tm));
                    let r = defect / scale;
                    eq.update(if r.is_nan() && !scale.is_finite() { f64::NAN } else { r }, (i, j));
                }
                if t >= s {
                    let bound = k.big_d * (rate.mu(t) / mu_s).powf(-k.lambda) * nu_d;
                    d1.update(exact_ratio(norm.operator(&(&tm * &ps.p1)), bound), (i, j));
                }
                if t <= s {
                    let bound = k.big_d * (mu_s / rate.mu(t)).powf(-k.lambda) * nu_d;
                    d2.update(exact_ratio(norm.operator(&(&tm * &ps.p2)), bound), (i, j));
                }
            }
            (eq, d1, d2)
        })
        .reduce(|| (W::new(), W::new(), W::new()), |a, b| (a.0.merge(b.0), a.1.merge(b.1), a.2.merge(b.2)));

    let at = |w: &W| w.at.map(|(i, j)| format!("(t, s) = ({}, {})", grid[i], grid[j]));
    let mut c = Check::new("equivariance", eq.value, eq.value <= CONTINUOUS_EQUIVARIANCE_TOL)
        .with_detail("||T P(s) - P(t) T|| / max(1, ||T||)");
    if let Some(a) = at(&eq) {
        c = c.at(a);
    }
    cert.push(c);
    for (name, w) in [("stable dichotomy estimate", d1), ("unstable dichotomy estimate", d2)] {
        let mut c = Check::ratio(name, w.value);
        if let Some(a) = at(&w) {
            c = c.at(a);
        }
        cert.push(c);
    }
    if let Some(defect) = family.self_check {
        cert.push(
            Check::new("composition law self-check", defect, defect <= COMPOSITION_TOL)
                .with_detail("relative defect of T(t,s) T(s,r) - T(t,r)"),
        );
    }
    cert.flag("grid-node-wise: between-node behavior is not certified");
    cert
}
