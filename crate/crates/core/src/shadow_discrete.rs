//! Discrete-time shadowing: weighted defect of a pseudo-orbit, the contraction operator `T`,
//! its fixed point, and verification of every conclusion about the resulting shadow.
//!
//! With `g_m(z) = A_m y_m + f_m(y_m + (I - P3_m) z_m) - y_{m+1}` the operator is
//!
//! ```text
//! (T z)_n = -P3_n g_{n-1} + sum_{m < n} A(n, m+1) P1_{m+1} g_m - sum_{m >= n} A(n, m+1) P2_{m+1} g_m
//! ```
//!
//! with the center term absent at `n = 0`. Its fixed point `z` gives `x_n = y_n + (I - P3_n) z_n`
//! with `x_{n+1} - A_n x_n - f_n(x_n) = -P3_{n+1} g_n`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapted_norms::AdaptedNorm;
use crate::certificate::{exact_ratio, Certificate, Check, Worst, REL_TOL};
use crate::error::{Error, Result};
use crate::linalg::Projections;
use crate::linear_discrete::{certify_dichotomy, DiscreteDichotomy};
use crate::nonlinearity::Nonlinearity;
use crate::TimeMode;

/// Relative tolerance of residual fiber membership, `1e-8 (1 + |r_n|)`.
pub const MEMBERSHIP_TOL: f64 = 1e-8;
/// Absolute tolerance of `P3 (x - y) = 0`, scaled by `max(1, sup |z|)`.
pub const CENTER_TOL: f64 = 1e-10;
/// Consecutive expanding updates tolerated before giving up.
const DIVERGENCE_STREAK: usize = 5;

#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub linear: DiscreteDichotomy,
    pub f: Nonlinearity,
}

impl DiscreteSystem {
    pub fn new(linear: DiscreteDichotomy, f: Nonlinearity) -> Self {
        Self { linear, f }
    }

    pub fn horizon(&self) -> usize {
        self.linear.horizon()
    }

    pub fn dim(&self) -> usize {
        self.linear.dim()
    }

    /// `(mu_{n+1}^l - mu_n^l) / (mu_{n+1}^l nu_n^d)`.
    pub fn weight(&self, n: usize) -> f64 {
        let k = &self.linear.constants;
        self.linear.rates.weight(n, k.lambda, k.d)
    }

    pub fn projections(&self, n: usize) -> &Projections {
        self.linear.projections.at(n)
    }

    /// `A_n x + f_n(x)`.
    pub fn step(&self, n: usize, x: &DVector<f64>) -> DVector<f64> {
        self.linear.cocycle.matrix(n) * x + self.f.eval(n, x)
    }

    pub fn constants(&self) -> TheoreticalConstants {
        let k = &self.linear.constants;
        theoretical_constants(self.f.lipschitz_c, k.big_d, k.lambda, TimeMode::Discrete)
    }

    pub fn extended(&self, horizon: usize) -> Result<Self> {
        Ok(Self { linear: self.linear.extended(horizon)?, f: self.f.clone() })
    }

    /// Dichotomy certificate plus a sampled check of the weighted Lipschitz bound of `f`.
    pub fn certify(&self, seed: u64) -> Result<Certificate> {
        let l = &self.linear;
        let mut cert = certify_dichotomy(&l.cocycle, &l.projections, &l.rates, &l.constants)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        cert.push(self.f.check_lipschitz(
            &l.rates,
            l.constants.lambda,
            l.constants.d,
            l.norm(),
            self.dim(),
            self.horizon(),
            200,
            &mut rng,
        ));
        Ok(cert)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOrbit {
    pub y: Vec<DVector<f64>>,
    /// Measured weighted defect.
    pub delta: f64,
}

impl PseudoOrbit {
    pub fn new(y: Vec<DVector<f64>>, sys: &DiscreteSystem) -> Result<Self> {
        let (delta, _) = weighted_defect(&y, sys)?;
        Ok(Self { y, delta })
    }
}

/// Per-step weighted defects `|y_{n+1} - A_n y_n - f_n(y_n)| / w_n` and their maximum.
pub fn weighted_defect(y: &[DVector<f64>], sys: &DiscreteSystem) -> Result<(f64, Vec<f64>)> {
    check_shape(y, sys.horizon() + 1, sys.dim(), "pseudo-orbit")?;
    let norm = sys.linear.norm();
    let per_step: Vec<f64> = (0..sys.horizon())
        .into_par_iter()
        .map(|n| {
            let w = sys.weight(n);
            assert!(w > 0.0, "degenerate weight at n = {n}");
            norm.vector(&(&y[n + 1] - sys.step(n, &y[n]))) / w
        })
        .collect();
    let delta = per_step.iter().copied().fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    Ok((delta, per_step))
}

pub(crate) fn check_shape(z: &[DVector<f64>], len: usize, dim: usize, what: &str) -> Result<()> {
    if z.len() != len {
        return Err(Error::ShapeMismatch(format!("{what} has {} nodes, expected {len}", z.len())));
    }
    if let Some((n, v)) = z.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(Error::ShapeMismatch(format!("{what} node {n} has dimension {}, expected {dim}", v.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoreticalConstants {
    pub q: f64,
    pub d_bar: f64,
    /// `C = D_bar / (1 - q)`, infinite when `q >= 1`.
    pub c: f64,
    pub contractive: bool,
}

/// `q`, `D_bar` and `C = D_bar / (1 - q)`.
///
/// Continuous: `q = c(2D + 1) + 2cD/lambda`, `D_bar = 2D + 2D/lambda + 1`.
/// Discrete: `q = c(4D + 1)`, `D_bar = 4D + 1`.
pub fn theoretical_constants(c: f64, big_d: f64, lambda: f64, mode: TimeMode) -> TheoreticalConstants {
    let (q, d_bar) = match mode {
        TimeMode::Continuous => {
            (c * (2.0 * big_d + 1.0) + 2.0 * c * big_d / lambda, 2.0 * big_d + 2.0 * big_d / lambda + 1.0)
        }
        TimeMode::Discrete => (c * (4.0 * big_d + 1.0), 4.0 * big_d + 1.0),
    };
    let contractive = q < 1.0;
    TheoreticalConstants { q, d_bar, c: if contractive { d_bar / (1.0 - q) } else { f64::INFINITY }, contractive }
}

pub(crate) fn not_contractive(k: &TheoreticalConstants, mode: TimeMode) -> Error {
    Error::NotContractive {
        condition: match mode {
            TimeMode::Discrete => "q = c(4D+1) must be < 1",
            TimeMode::Continuous => "q = c(2D+1) + 2cD/lambda must be < 1",
        },
        q: k.q,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TruncationPolicy {
    /// Sum the unstable part up to the end of the window and report the analytic tail bound.
    #[default]
    FiniteHorizon,
    /// Extend the system beyond the window until the tail bound at the window end is below the
    /// tolerance. Discrete systems given by generators only.
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    /// Target accuracy of the fixed point in the adapted sup norm.
    pub tol: f64,
    pub max_iter: usize,
    pub truncation: TruncationPolicy,
    /// Tail-bound tolerance; defaults to `1e-6 delta`.
    pub tail_tolerance: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 500, truncation: TruncationPolicy::FiniteHorizon, tail_tolerance: None }
    }
}

impl SolveOptions {
    pub fn tail_tolerance(&self, delta: f64) -> f64 {
        self.tail_tolerance.unwrap_or(1e-6 * delta)
    }
}

/// Output of a shadowing solve, shared by discrete and continuous time.
#[derive(Debug, Clone)]
pub struct ShadowResult {
    pub mode: TimeMode,
    /// Node times (`n` in discrete time).
    pub times: Vec<f64>,
    pub z: Vec<DVector<f64>>,
    pub z_bar: Vec<DVector<f64>>,
    pub x: Vec<DVector<f64>>,
    pub delta: f64,
    pub q: f64,
    pub d_bar: f64,
    pub c: f64,
    pub iterations: usize,
    /// `||T z - z||` in the adapted sup norm.
    pub fp_residual: f64,
    /// `||T 0||` in the adapted sup norm.
    pub t0_norm: f64,
    /// Ratios of successive update sizes.
    pub contraction_ratios: Vec<f64>,
    /// Tail bound of the truncated unstable sum at the first node.
    pub tail_bound: f64,
    /// Last node whose tail bound is within the tolerance.
    pub certified_window: usize,
    pub truncation_flag: Option<String>,
    pub approximate_norms: bool,
    /// Richardson estimate of the quadrature error (continuous time only).
    pub quadrature_estimate: Option<f64>,
    pub tol: f64,
}

impl ShadowResult {
    /// `sup_n |x_n - y_n|`, in the system norm.
    pub fn sup_distance(&self, y: &[DVector<f64>], norm: crate::linalg::Norm) -> f64 {
        self.x.iter().zip(y).map(|(x, y)| norm.vector(&(x - y))).fold(0.0, f64::max)
    }
}

/// The operator `T` for one pseudo-orbit on the window `[0, N]`.
pub struct DiscreteOperator<'a> {
    sys: &'a DiscreteSystem,
    y: &'a [DVector<f64>],
    pub norm: AdaptedNorm,
    /// `A_m y_m`.
    ay: Vec<DVector<f64>>,
}

impl<'a> DiscreteOperator<'a> {
    pub fn new(sys: &'a DiscreteSystem, y: &'a [DVector<f64>]) -> Result<Self> {
        check_shape(y, sys.horizon() + 1, sys.dim(), "pseudo-orbit")?;
        let norm = AdaptedNorm::discrete(&sys.linear)?;
        let ay = (0..sys.horizon()).map(|m| sys.linear.cocycle.matrix(m) * &y[m]).collect();
        Ok(Self { sys, y, norm, ay })
    }

    fn g(&self, z: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (0..self.sys.horizon())
            .into_par_iter()
            .map(|m| {
                let p = self.sys.projections(m);
                let zb = &z[m] - &p.p3 * &z[m];
                &self.ay[m] + self.sys.f.eval(m, &(&self.y[m] + zb)) - &self.y[m + 1]
            })
            .collect()
    }

    pub fn apply(&self, z: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let big_n = self.sys.horizon();
        let dim = self.sys.dim();
        let g = self.g(z);
        let mut out: Vec<DVector<f64>> = vec![DVector::zeros(dim); big_n + 1];
        let mut s = DVector::zeros(dim);
        for n in 0..big_n {
            s = &self.norm.fwd[n] * &s + &self.sys.projections(n + 1).p1 * &g[n];
            out[n + 1] += &s - &self.sys.projections(n + 1).p3 * &g[n];
        }
        let mut u = DVector::zeros(dim);
        for n in (0..big_n).rev() {
            u = &self.norm.bwd[n] * (&self.sys.projections(n + 1).p2 * &g[n] + &u);
            out[n] -= &u;
        }
        out
    }

    /// Tail bound `D (delta + c ||z||) (mu_n / mu_N)^lambda` of the truncated unstable sum, per node.
    pub fn tail_bounds(&self, delta: f64, z_scale: f64) -> Vec<f64> {
        let last = self.norm.last();
        let has_unstable = self.norm.projections.iter().any(|p| p.p2.iter().any(|&v| v != 0.0));
        let k = &self.sys.linear.constants;
        let scale = if self.sys.f.lipschitz_c == 0.0 { delta } else { delta + self.sys.f.lipschitz_c * z_scale };
        (0..=last)
            .map(|n| {
                if has_unstable && scale > 0.0 {
                    k.big_d * scale * self.norm.mu_l[n] / self.norm.mu_l[last]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// `T z` together with the per-node tail bound of the truncated unstable sum.
#[derive(Debug, Clone)]
pub struct Applied {
    pub tz: Vec<DVector<f64>>,
    pub tail_bound: Vec<f64>,
}

/// One application of `T`. Fails with `TailBoundTooLarge` when no node of the window has a tail
/// bound within the tolerance.
pub fn apply_t(
    z: &[DVector<f64>],
    y: &PseudoOrbit,
    sys: &DiscreteSystem,
    tail_tolerance: Option<f64>,
) -> Result<Applied> {
    check_shape(z, sys.horizon() + 1, sys.dim(), "z")?;
    let op = DiscreteOperator::new(sys, &y.y)?;
    let z_scale = op.norm.sup_norm(z);
    let tail_bound = op.tail_bounds(y.delta, z_scale);
    let tol = tail_tolerance.unwrap_or(1e-6 * y.delta);
    if tail_bound[0] > tol {
        return Err(Error::TailBoundTooLarge { bound: tail_bound[0], tolerance: tol });
    }
    Ok(Applied { tz: op.apply(z), tail_bound })
}

pub(crate) fn sub(a: &[DVector<f64>], b: &[DVector<f64>]) -> Vec<DVector<f64>> {
    a.iter().zip(b).map(|(a, b)| a - b).collect()
}

/// Fixed-point iteration shared by the discrete and continuous solvers.
pub(crate) struct Iteration {
    pub z: Vec<DVector<f64>>,
    pub iterations: usize,
    pub fp_residual: f64,
    pub t0_norm: f64,
    pub ratios: Vec<f64>,
}

pub(crate) fn iterate(
    apply: impl Fn(&[DVector<f64>]) -> Vec<DVector<f64>>,
    sup: impl Fn(&[DVector<f64>]) -> f64,
    z0: Vec<DVector<f64>>,
    linear: bool,
    opts: &SolveOptions,
) -> Result<Iteration> {
    let mut z = apply(&z0);
    let t0_norm = sup(&z);
    let mut iterations = 1;
    let mut ratios = Vec::new();
    let mut prev = t0_norm;
    let mut streak = 0;
    if !linear && prev > 0.0 {
        loop {
            if iterations >= opts.max_iter {
                return Err(Error::Diverged(format!(
                    "no convergence after {iterations} iterations, last update {prev:e}"
                )));
            }
            let next = apply(&z);
            iterations += 1;
            let diff = sup(&sub(&next, &z));
            z = next;
            if !diff.is_finite() {
                return Err(Error::Diverged(format!("non-finite update at iteration {iterations}")));
            }
            let ratio = diff / prev;
            ratios.push(ratio);
            streak = if ratio > 1.0 { streak + 1 } else { 0 };
            if streak >= DIVERGENCE_STREAK {
                return Err(Error::Diverged(format!(
                    "update ratios above 1 for {DIVERGENCE_STREAK} consecutive iterations"
                )));
            }
            let q_hat = ratio.max(1e-3);
            if diff <= opts.tol * (1.0 - q_hat.min(0.999)) / q_hat {
                break;
            }
            prev = diff;
        }
    }
    let fp_residual = sup(&sub(&apply(&z), &z));
    Ok(Iteration { z, iterations, fp_residual, t0_norm, ratios })
}

/// Solves `z = T z` by iteration from `z = 0` and builds the shadow `x = y + (I - P3) z`.
pub fn solve_shadow(y: &PseudoOrbit, sys: &DiscreteSystem, opts: &SolveOptions) -> Result<ShadowResult> {
    let k = sys.constants();
    if !k.contractive {
        return Err(not_contractive(&k, TimeMode::Discrete));
    }
    let (delta, _) = weighted_defect(&y.y, sys)?;
    let tol = opts.tail_tolerance(delta);
    let big_n = sys.horizon();
    match opts.truncation {
        TruncationPolicy::FiniteHorizon => solve_window(&y.y, sys, opts, delta, k, tol, None),
        TruncationPolicy::Extended => {
            if !sys.linear.can_extend() {
                return Err(Error::InvalidInput("extended truncation needs a generator-backed system".into()));
            }
            let mu_l = |n: usize| sys.linear.rates.mu(n).powf(sys.linear.constants.lambda);
            let big = sys.linear.constants.big_d * delta * (1.0 + sys.f.lipschitz_c * k.c);
            let cap = (16 * big_n).max(big_n + 1024);
            let mut ext = big_n;
            while big > 0.0 && big * mu_l(big_n) / mu_l(ext) > tol {
                ext += 1;
                if ext > cap {
                    return Err(Error::TailBoundTooLarge { bound: big * mu_l(big_n) / mu_l(cap), tolerance: tol });
                }
            }
            let sys_ext = sys.extended(ext)?;
            let mut y_ext = y.y.clone();
            for n in big_n..ext {
                let next = sys_ext.step(n, &y_ext[n]);
                y_ext.push(next);
            }
            let mut r = solve_window(&y_ext, &sys_ext, opts, delta, k, tol, Some(big_n))?;
            r.times.truncate(big_n + 1);
            r.z.truncate(big_n + 1);
            r.z_bar.truncate(big_n + 1);
            r.x.truncate(big_n + 1);
            r.certified_window = r.certified_window.min(big_n);
            r.truncation_flag = Some(format!("extended: window [0, {big_n}] solved on [0, {ext}]"));
            Ok(r)
        }
    }
}

fn solve_window(
    y: &[DVector<f64>],
    sys: &DiscreteSystem,
    opts: &SolveOptions,
    delta: f64,
    k: TheoreticalConstants,
    tol: f64,
    report_at: Option<usize>,
) -> Result<ShadowResult> {
    let op = DiscreteOperator::new(sys, y)?;
    let tails = op.tail_bounds(delta, k.c * delta);
    let probe = report_at.unwrap_or(0);
    if tails[probe] > tol {
        return Err(Error::TailBoundTooLarge { bound: tails[probe], tolerance: tol });
    }
    let certified_window = tails.iter().rposition(|&t| t <= tol).unwrap_or(0);
    let big_n = sys.horizon();
    let zeros = vec![DVector::zeros(sys.dim()); big_n + 1];
    let it = iterate(|z| op.apply(z), |z| op.norm.sup_norm(z), zeros, sys.f.lipschitz_c == 0.0, opts)?;
    let z_bar: Vec<DVector<f64>> = it.z.iter().enumerate().map(|(n, z)| z - &sys.projections(n).p3 * z).collect();
    let x = y.iter().zip(&z_bar).map(|(y, zb)| y + zb).collect();
    let approximate_norms = op.norm.any_approximate(&it.z);
    let flag = (certified_window < big_n).then(|| {
        format!(
            "finite horizon: unstable sum truncated at N = {big_n}; tail bound <= {tol:e} on [0, {certified_window}]"
        )
    });
    Ok(ShadowResult {
        mode: TimeMode::Discrete,
        times: (0..=big_n).map(|n| n as f64).collect(),
        z: it.z,
        z_bar,
        x,
        delta,
        q: k.q,
        d_bar: k.d_bar,
        c: k.c,
        iterations: it.iterations,
        fp_residual: it.fp_residual,
        t0_norm: it.t0_norm,
        contraction_ratios: it.ratios,
        tail_bound: tails[probe],
        certified_window,
        truncation_flag: flag,
        approximate_norms,
        quadrature_estimate: None,
        tol: opts.tol,
    })
}

/// Residuals `r_n = x_{n+1} - A_n x_n - f_n(x_n)`.
pub fn residuals(x: &[DVector<f64>], sys: &DiscreteSystem) -> Vec<DVector<f64>> {
    (0..sys.horizon()).into_par_iter().map(|n| &x[n + 1] - sys.step(n, &x[n])).collect()
}

/// Checks the conclusions about a computed shadow:
/// (a) `P3_n (x_n - y_n) = 0`; (b) `sup |x_n - y_n| <= C delta`;
/// (c) `(P1_{n+1} + P2_{n+1}) r_n = 0`; (d) `|r_n| <= C delta (2D + 1) nu_n^d`;
/// plus the operator bound `||T 0|| <= D_bar delta` and the fixed-point residual.
pub fn verify_shadow(r: &ShadowResult, y: &PseudoOrbit, sys: &DiscreteSystem) -> Certificate {
    let big_n = sys.horizon();
    let norm = sys.linear.norm();
    let mut cert = Certificate::new(format!("n in [0, {big_n}] (finite horizon)"));
    if r.x.len() != big_n + 1 || y.y.len() != big_n + 1 {
        cert.push(Check::new("result matches window", f64::NAN, false));
        return cert;
    }
    let k = &sys.linear.constants;
    let z_scale = r.z.iter().map(|z| norm.vector(z)).fold(1.0, f64::max);

    let mut center = Worst::new();
    let mut dist = Worst::new();
    for n in 0..=big_n {
        let e = &r.x[n] - &y.y[n];
        center.update(norm.vector(&(&sys.projections(n).p3 * &e)), n);
        dist.update(norm.vector(&e), n);
    }
    let at = |w: &Worst<usize>| w.at.map(|n| format!("n = {n}")).unwrap_or_default();
    cert.push(
        Check::new("center agreement P3 (x - y) = 0", center.value, center.value <= CENTER_TOL * z_scale)
            .at(at(&center))
            .with_detail("largest |P3_n (x_n - y_n)|"),
    );
    cert.push(Check::ratio("sup |x - y| <= C delta", exact_ratio(dist.value, r.c * r.delta)).at(at(&dist)));

    let res = residuals(&r.x, sys);
    let (mut member, mut member_start, mut est) = (Worst::new(), Worst::new(), Worst::new());
    for (n, rn) in res.iter().enumerate() {
        let size = norm.vector(rn);
        let (p_next, p_here) = (sys.projections(n + 1), sys.projections(n));
        member.update(norm.vector(&(&p_next.p1 * rn + &p_next.p2 * rn)) / (1.0 + size), n);
        member_start.update(norm.vector(&(&p_here.p1 * rn + &p_here.p2 * rn)) / (1.0 + size), n);
        let bound = r.c * r.delta * (2.0 * k.big_d + 1.0) * sys.linear.rates.nu(n).powf(k.d);
        est.update(exact_ratio(size, bound), n);
    }
    cert.push(
        Check::new("residual in Im P3 (end of step)", member.value, member.value <= MEMBERSHIP_TOL)
            .at(at(&member))
            .with_detail("|(P1_{n+1} + P2_{n+1}) r_n| / (1 + |r_n|)"),
    );
    cert.push(
        Check::new("residual in Im P3 (start of step, informational)", member_start.value, true)
            .at(at(&member_start))
            .with_detail("|(P1_n + P2_n) r_n| / (1 + |r_n|)"),
    );
    cert.push(Check::ratio("residual bound C delta (2D+1) nu_n^d", est.value).at(at(&est)));
    cert.push(Check::ratio("||T 0|| <= D_bar delta", exact_ratio(r.t0_norm, r.d_bar * r.delta)));
    cert.push(
        Check::new("fixed-point residual", r.fp_residual, r.fp_residual <= r.tol.max(REL_TOL * r.t0_norm))
            .with_detail("||T z - z|| in the adapted sup norm, allowed max(tol, 1e-8 ||T 0||)"),
    );
    push_flags(&mut cert, r);
    cert
}

pub(crate) fn push_flags(cert: &mut Certificate, r: &ShadowResult) {
    if let Some(f) = &r.truncation_flag {
        cert.flag(f.clone());
    }
    if r.approximate_norms {
        cert.flag("approximate: stable adapted-norm sups truncated at the window end");
    }
}

/// `sup |T z1 - T z2| / sup |z1 - z2|` in the adapted sup norm.
pub fn contraction_ratio(op: &DiscreteOperator<'_>, z1: &[DVector<f64>], z2: &[DVector<f64>]) -> f64 {
    let num = op.norm.sup_norm(&sub(&op.apply(z1), &op.apply(z2)));
    exact_ratio(num, op.norm.sup_norm(&sub(z1, z2)))
}

/// Dense matrix of one step, for callers that only need `A_n`.
pub fn step_matrix(sys: &DiscreteSystem, n: usize) -> &DMatrix<f64> {
    sys.linear.cocycle.matrix(n)
}
