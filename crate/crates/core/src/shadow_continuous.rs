//! Continuous-time shadowing on a fixed grid. The integrals of the operator
//!
//! ```text
//! (T z)(t) = -P3(t) g(t) + int_0^t T(t, s) P1(s) g(s) ds - int_t^tmax T(t, s) P2(s) g(s) ds,
//! g(s) = A(s) y(s) + f(s, y(s) + (I - P3(s)) z(s)) - y'(s)
//! ```
//!
//! are evaluated by the composite trapezoid rule as one-step recursions, and the same recursions
//! on every other node give a Richardson estimate of the quadrature error.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapted_norms::AdaptedNorm;
use crate::certificate::{exact_ratio, Certificate, Check, Worst, REL_TOL};
use crate::error::{Error, Result};
use crate::linalg::Projections;
use crate::linear_continuous::ContinuousDichotomy;
use crate::nonlinearity::ContinuousNonlinearity;
use crate::shadow_discrete::{
    check_shape, iterate, not_contractive, push_flags, sub, theoretical_constants, ShadowResult, SolveOptions,
    TheoreticalConstants, CENTER_TOL, MEMBERSHIP_TOL,
};
use crate::TimeMode;

/// Multiplier on Richardson error estimates when they are used as budgets.
pub const BUDGET_SAFETY: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct ContinuousSystem {
    pub linear: ContinuousDichotomy,
    pub f: ContinuousNonlinearity,
}

impl ContinuousSystem {
    pub fn new(linear: ContinuousDichotomy, f: ContinuousNonlinearity) -> Self {
        Self { linear, f }
    }

    pub fn dim(&self) -> usize {
        self.linear.dim()
    }

    /// `mu'(t) / (mu(t) nu(t)^d)`.
    pub fn weight(&self, t: f64) -> f64 {
        self.linear.rate.weight(t, self.linear.constants.d)
    }

    /// `A(t) x + f(t, x)`.
    pub fn rhs(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.linear.family.a(t) * x + self.f.eval(t, x)
    }

    pub fn constants(&self) -> TheoreticalConstants {
        let k = &self.linear.constants;
        theoretical_constants(self.f.lipschitz_c, k.big_d, k.lambda, TimeMode::Continuous)
    }

    pub fn certify(&self, grid: &[f64], seed: u64) -> Certificate {
        let l = &self.linear;
        let mut cert = l.certify(grid);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        cert.push(self.f.check_lipschitz(&l.rate, l.constants.d, l.norm(), self.dim(), l.t_max, 200, &mut rng));
        cert
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousPseudoOrbit {
    pub grid: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    pub y_prime: Vec<DVector<f64>>,
    /// Weighted defect, including the differentiation error when `y'` was not supplied.
    pub delta: f64,
    pub differentiated: bool,
}

impl ContinuousPseudoOrbit {
    /// Builds a pseudo-orbit from samples. Without `y_prime` the derivative is taken by
    /// three-point differences and its Richardson error estimate is added to the defect.
    pub fn new(
        grid: Vec<f64>,
        y: Vec<DVector<f64>>,
        y_prime: Option<Vec<DVector<f64>>>,
        sys: &ContinuousSystem,
    ) -> Result<Self> {
        check_grid(&grid, sys.linear.t_max)?;
        check_shape(&y, grid.len(), sys.dim(), "pseudo-orbit")?;
        let (y_prime, fd_error, differentiated) = match y_prime {
            Some(p) => {
                check_shape(&p, grid.len(), sys.dim(), "y'")?;
                (p, vec![0.0; grid.len()], false)
            }
            None => {
                let norm = sys.linear.norm();
                let p = fd_derivative(&grid, &y);
                let idx = coarse_indices(grid.len());
                let coarse_t: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
                let coarse_y: Vec<DVector<f64>> = idx.iter().map(|&i| y[i].clone()).collect();
                let pc = fd_derivative(&coarse_t, &coarse_y);
                let est: Vec<f64> =
                    idx.iter().zip(&pc).map(|(&i, c)| BUDGET_SAFETY * norm.vector(&(&p[i] - c)) / 3.0).collect();
                (p, spread(&idx, &est, grid.len()), true)
            }
        };
        let (delta, _) = weighted_defect_continuous(&grid, &y, &y_prime, sys)?;
        let extra = fd_error.iter().zip(&grid).map(|(e, &t)| e / sys.weight(t)).fold(0.0, f64::max);
        Ok(Self { grid, y, y_prime, delta: delta + extra, differentiated })
    }
}

fn check_grid(grid: &[f64], t_max: f64) -> Result<()> {
    if grid.len() < 3 {
        return Err(Error::InvalidInput(format!("grid needs at least 3 nodes, got {}", grid.len())));
    }
    if grid[0] < 0.0 || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("grid must be strictly increasing in [0, t_max]".into()));
    }
    if grid[grid.len() - 1] > t_max * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!("grid ends at {} beyond t_max = {t_max}", grid[grid.len() - 1])));
    }
    Ok(())
}

/// Per-node weighted defects `|y' - A y - f(t, y)| / w(t)` and their maximum.
pub fn weighted_defect_continuous(
    grid: &[f64],
    y: &[DVector<f64>],
    y_prime: &[DVector<f64>],
    sys: &ContinuousSystem,
) -> Result<(f64, Vec<f64>)> {
    check_shape(y, grid.len(), sys.dim(), "pseudo-orbit")?;
    check_shape(y_prime, grid.len(), sys.dim(), "y'")?;
    let norm = sys.linear.norm();
    let per: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| norm.vector(&(&y_prime[k] - sys.rhs(grid[k], &y[k]))) / sys.weight(grid[k]))
        .collect();
    let delta = per.iter().copied().fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    Ok((delta, per))
}

/// Three-point derivative on a possibly non-uniform grid, one-sided at both ends.
pub fn fd_derivative(t: &[f64], v: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let k = t.len();
    assert!(k >= 3 && v.len() == k);
    (0..k)
        .map(|i| {
            let j = i.clamp(1, k - 2);
            let (h1, h2) = (t[j] - t[j - 1], t[j + 1] - t[j]);
            let (a, b, c) = if i == 0 {
                (-(2.0 * h1 + h2) / (h1 * (h1 + h2)), (h1 + h2) / (h1 * h2), -h1 / (h2 * (h1 + h2)))
            } else if i == k - 1 {
                (h2 / (h1 * (h1 + h2)), -(h1 + h2) / (h1 * h2), (h1 + 2.0 * h2) / (h2 * (h1 + h2)))
            } else {
                (-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2)))
            };
            &v[j - 1] * a + &v[j] * b + &v[j + 1] * c
        })
        .collect()
}

/// Every other node, always keeping the last one.
pub fn coarse_indices(len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).step_by(2).collect();
    if *idx.last().unwrap() != len - 1 {
        idx.push(len - 1);
    }
    idx
}

/// Extends values at coarse nodes to all nodes by taking the larger of the two bracketing values.
fn spread(idx: &[usize], vals: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0_f64; len];
    for (j, w) in idx.windows(2).enumerate() {
        let m = vals[j].max(vals[j + 1]);
        for o in &mut out[w[0]..=w[1]] {
            *o = o.max(m);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct QuadraturePolicy {
    /// Largest accepted Richardson estimate (adapted sup norm); defaults to `1e-2 D_bar delta`.
    pub tolerance: Option<f64>,
}

impl QuadraturePolicy {
    pub fn tolerance(&self, d_bar: f64, delta: f64) -> f64 {
        self.tolerance.unwrap_or(1e-2 * d_bar * delta)
    }
}

struct Sweep {
    idx: Vec<usize>,
    fwd: Vec<DMatrix<f64>>,
    bwd: Vec<DMatrix<f64>>,
}

/// The trapezoid realization of `T` for one pseudo-orbit.
pub struct ContinuousOperator<'a> {
    sys: &'a ContinuousSystem,
    y: &'a ContinuousPseudoOrbit,
    pub norm: AdaptedNorm,
    ay: Vec<DVector<f64>>,
    coarse: Sweep,
}

impl<'a> ContinuousOperator<'a> {
    pub fn new(sys: &'a ContinuousSystem, y: &'a ContinuousPseudoOrbit) -> Result<Self> {
        check_grid(&y.grid, sys.linear.t_max)?;
        let norm = AdaptedNorm::continuous(&sys.linear, &y.grid)?;
        let ay = y.grid.par_iter().zip(&y.y).map(|(&t, y)| sys.linear.family.a(t) * y).collect();
        let idx = coarse_indices(y.grid.len());
        let (fwd, bwd) = idx
            .windows(2)
            .map(|w| {
                let (mut f, mut b) = (norm.fwd[w[0]].clone(), norm.bwd[w[1] - 1].clone());
                for k in w[0] + 1..w[1] {
                    f = &norm.fwd[k] * f;
                    b = &norm.bwd[w[1] - 1 - (k - w[0])] * b;
                }
                (f, b)
            })
            .unzip();
        Ok(Self { sys, y, norm, ay, coarse: Sweep { idx, fwd, bwd } })
    }

    pub fn grid(&self) -> &[f64] {
        &self.y.grid
    }

    pub fn projections(&self, k: usize) -> &Projections {
        &self.norm.projections[k]
    }

    fn g(&self, z: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let (t, y) = (&self.y.grid, &self.y.y);
        (0..t.len())
            .into_par_iter()
            .map(|k| {
                let zb = &z[k] - &self.projections(k).p3 * &z[k];
                &self.ay[k] + self.sys.f.eval(t[k], &(&y[k] + zb)) - &self.y.y_prime[k]
            })
            .collect()
    }

    fn sweep(
        &self,
        idx: &[usize],
        fwd: &[DMatrix<f64>],
        bwd: &[DMatrix<f64>],
        g: &[DVector<f64>],
    ) -> Vec<DVector<f64>> {
        let t = &self.y.grid;
        let dim = self.sys.dim();
        let mut out: Vec<DVector<f64>> = idx.iter().map(|&k| -(&self.projections(k).p3 * &g[k])).collect();
        let mut s = DVector::zeros(dim);
        for j in 0..idx.len() - 1 {
            let (a, b) = (idx[j], idx[j + 1]);
            let h2 = 0.5 * (t[b] - t[a]);
            s = &fwd[j] * (&s + &g[a] * h2) + &self.projections(b).p1 * &g[b] * h2;
            out[j + 1] += &s;
        }
        let mut u = DVector::zeros(dim);
        for j in (0..idx.len() - 1).rev() {
            let (a, b) = (idx[j], idx[j + 1]);
            let h2 = 0.5 * (t[b] - t[a]);
            u = &bwd[j] * (&u + &g[b] * h2) + &self.projections(a).p2 * &g[a] * h2;
            out[j] -= &u;
        }
        out
    }

    pub fn apply(&self, z: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let g = self.g(z);
        let all: Vec<usize> = (0..self.y.grid.len()).collect();
        self.sweep(&all, &self.norm.fwd, &self.norm.bwd, &g)
    }

    /// `T z` on the coarse grid (every other node).
    pub fn apply_coarse(&self, z: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let g = self.g(z);
        self.sweep(&self.coarse.idx, &self.coarse.fwd, &self.coarse.bwd, &g)
    }

    pub fn coarse_indices(&self) -> &[usize] {
        &self.coarse.idx
    }

    /// `max |T_h z - T_2h z|_t / 3` over the coarse nodes, and `T_h z`.
    pub fn richardson(&self, z: &[DVector<f64>]) -> (f64, Vec<DVector<f64>>) {
        let fine = self.apply(z);
        let coarse = self.apply_coarse(z);
        let est = self
            .coarse
            .idx
            .par_iter()
            .zip(&coarse)
            .map(|(&k, c)| self.norm.adapted_norm(&(&fine[k] - c), k) / 3.0)
            .reduce(|| 0.0, f64::max);
        (est, fine)
    }

    /// `D (delta + c ||z||) / lambda (mu(t) / mu(t_max))^lambda` per node; zero without an
    /// unstable fiber.
    pub fn tail_bounds(&self, delta: f64, z_scale: f64) -> Vec<f64> {
        let last = self.norm.last();
        let has_unstable = self.norm.projections.iter().any(|p| p.p2.iter().any(|&v| v != 0.0));
        let k = &self.sys.linear.constants;
        let scale = if self.sys.f.lipschitz_c == 0.0 { delta } else { delta + self.sys.f.lipschitz_c * z_scale };
        (0..=last)
            .map(|n| {
                if has_unstable && scale > 0.0 {
                    k.big_d * scale / k.lambda * self.norm.mu_l[n] / self.norm.mu_l[last]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AppliedContinuous {
    pub tz: Vec<DVector<f64>>,
    pub tail_bound: Vec<f64>,
    pub quadrature_estimate: f64,
}

pub fn apply_t_continuous(
    z: &[DVector<f64>],
    y: &ContinuousPseudoOrbit,
    sys: &ContinuousSystem,
    quad: &QuadraturePolicy,
    tail_tolerance: Option<f64>,
) -> Result<AppliedContinuous> {
    check_shape(z, y.grid.len(), sys.dim(), "z")?;
    let op = ContinuousOperator::new(sys, y)?;
    let tail_bound = op.tail_bounds(y.delta, op.norm.sup_norm(z));
    let tol = tail_tolerance.unwrap_or(1e-6 * y.delta);
    if tail_bound[0] > tol {
        return Err(Error::TailBoundTooLarge { bound: tail_bound[0], tolerance: tol });
    }
    let (est, tz) = op.richardson(z);
    let qtol = quad.tolerance(sys.constants().d_bar, y.delta);
    if est > qtol {
        return Err(Error::QuadratureUnresolved { estimate: est, tolerance: qtol });
    }
    Ok(AppliedContinuous { tz, tail_bound, quadrature_estimate: est })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ContinuousSolveOptions {
    #[serde(flatten)]
    pub solve: SolveOptions,
    pub quadrature: QuadraturePolicy,
}

pub fn solve_shadow_continuous(
    y: &ContinuousPseudoOrbit,
    sys: &ContinuousSystem,
    opts: &ContinuousSolveOptions,
) -> Result<ShadowResult> {
    let k = sys.constants();
    if !k.contractive {
        return Err(not_contractive(&k, TimeMode::Continuous));
    }
    let delta = y.delta;
    let op = ContinuousOperator::new(sys, y)?;
    let tol = opts.solve.tail_tolerance(delta);
    let tails = op.tail_bounds(delta, k.c * delta);
    if tails[0] > tol {
        return Err(Error::TailBoundTooLarge { bound: tails[0], tolerance: tol });
    }
    let certified_window = tails.iter().rposition(|&t| t <= tol).unwrap_or(0);
    let len = y.grid.len();
    let zeros = vec![DVector::zeros(sys.dim()); len];
    let it = iterate(|z| op.apply(z), |z| op.norm.sup_norm(z), zeros, sys.f.lipschitz_c == 0.0, &opts.solve)?;
    let (est, _) = op.richardson(&it.z);
    let qtol = opts.quadrature.tolerance(k.d_bar, delta);
    if est > qtol {
        return Err(Error::QuadratureUnresolved { estimate: est, tolerance: qtol });
    }
    let z_bar: Vec<DVector<f64>> = it.z.iter().enumerate().map(|(n, z)| z - &op.projections(n).p3 * z).collect();
    let x = y.y.iter().zip(&z_bar).map(|(y, zb)| y + zb).collect();
    let approximate_norms = op.norm.any_approximate(&it.z);
    let t_end = y.grid[len - 1];
    let flag = (certified_window < len - 1).then(|| {
        format!(
            "finite horizon: unstable integral truncated at t = {t_end}; tail bound <= {tol:e} on [0, {}]",
            y.grid[certified_window]
        )
    });
    Ok(ShadowResult {
        mode: TimeMode::Continuous,
        times: y.grid.clone(),
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
        tail_bound: tails[0],
        certified_window,
        truncation_flag: flag,
        approximate_norms,
        quadrature_estimate: Some(est),
        tol: opts.solve.tol,
    })
}

/// Grid residual `x' - A x - f(t, x)` with `x' = y' + (z_bar)'` by differences, and a
/// per-node Richardson budget for its discretization error.
pub struct GridResidual {
    pub r: Vec<DVector<f64>>,
    pub budget: Vec<f64>,
}

pub fn grid_residual(r: &ShadowResult, y: &ContinuousPseudoOrbit, sys: &ContinuousSystem) -> Result<GridResidual> {
    let op = ContinuousOperator::new(sys, y)?;
    let norm = sys.linear.norm();
    let t = &y.grid;
    let resid = |times: &[f64], nodes: &[usize], zb: &[DVector<f64>]| -> Vec<DVector<f64>> {
        let dzb = fd_derivative(times, zb);
        nodes
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let x = &y.y[k] + &zb[j];
                &y.y_prime[k] + &dzb[j] - sys.rhs(t[k], &x)
            })
            .collect()
    };
    let all: Vec<usize> = (0..t.len()).collect();
    let fine = resid(t, &all, &r.z_bar);
    let idx = op.coarse_indices().to_vec();
    let zc: Vec<DVector<f64>> =
        op.apply_coarse(&r.z).into_iter().zip(&idx).map(|(z, &k)| &z - &op.projections(k).p3 * &z).collect();
    let tc: Vec<f64> = idx.iter().map(|&k| t[k]).collect();
    let coarse = resid(&tc, &idx, &zc);
    let est: Vec<f64> =
        idx.iter().zip(&coarse).map(|(&k, c)| BUDGET_SAFETY * norm.vector(&(&fine[k] - c)) / 3.0).collect();
    Ok(GridResidual { r: fine, budget: spread(&idx, &est, t.len()) })
}

/// Node-wise checks of the continuous conclusions: center agreement, `sup |x - y| <= C delta`,
/// residual in `Im P3(t)` and the pointwise bound `C delta (2D + 1) nu^d max(1, mu'/mu)`, with
/// residuals measured by differences and allowed their Richardson budget.
pub fn verify_shadow_continuous(r: &ShadowResult, y: &ContinuousPseudoOrbit, sys: &ContinuousSystem) -> Certificate {
    let t = &y.grid;
    let len = t.len();
    let mut cert = Certificate::new(format!(
        "grid nodes in [{}, {}] ({len} points); between-node behavior is not certified",
        t[0],
        t[len - 1]
    ));
    if r.x.len() != len || y.y.len() != len {
        cert.push(Check::new("result matches grid", f64::NAN, false));
        return cert;
    }
    let norm = sys.linear.norm();
    let k = &sys.linear.constants;
    let z_scale = r.z.iter().map(|z| norm.vector(z)).fold(1.0, f64::max);
    let quad = r.quadrature_estimate.unwrap_or(0.0);
    let at = |w: &Worst<usize>| w.at.map(|i| format!("t = {}", t[i])).unwrap_or_default();

    let mut center = Worst::new();
    let mut dist = Worst::new();
    for i in 0..len {
        let e = &r.x[i] - &y.y[i];
        center.update(norm.vector(&(&sys.linear.projections.at(t[i]).p3 * &e)), i);
        dist.update(norm.vector(&e), i);
    }
    cert.push(
        Check::new("center agreement P3 (x - y) = 0", center.value, center.value <= CENTER_TOL * z_scale)
            .at(at(&center))
            .with_detail("largest |P3(t) (x(t) - y(t))|"),
    );
    cert.push(
        Check::ratio("sup |x - y| <= C delta", exact_ratio(dist.value, r.c * r.delta + quad / (1.0 - r.q)))
            .at(at(&dist))
            .with_detail("worst lhs/rhs; rhs includes the quadrature estimate / (1 - q)"),
    );

    match grid_residual(r, y, sys) {
        Ok(gr) => {
            let (mut member, mut est, mut budget) = (Worst::new(), Worst::new(), Worst::new());
            for i in 0..len {
                let p = sys.linear.projections.at(t[i]);
                let ri = &gr.r[i];
                let size = norm.vector(ri);
                let b = gr.budget[i];
                budget.update(b, i);
                let off = norm.vector(&(&p.p1 * ri + &p.p2 * ri));
                member.update(exact_ratio(off, MEMBERSHIP_TOL * (1.0 + size) + b), i);
                let rate = &sys.linear.rate;
                let bound = r.c
                    * r.delta
                    * (2.0 * k.big_d + 1.0)
                    * rate.nu(t[i]).powf(k.d)
                    * (rate.mu_prime(t[i]) / rate.mu(t[i])).max(1.0);
                est.update(exact_ratio(size, bound + b), i);
            }
            cert.push(
                Check::ratio("residual in Im P3", member.value)
                    .at(at(&member))
                    .with_detail("|(P1 + P2) r| / (1e-8 (1 + |r|) + budget)"),
            );
            cert.push(Check::ratio("residual bound C delta (2D+1) nu^d max(1, mu'/mu)", est.value).at(at(&est)));
            cert.push(
                Check::new("differentiation budget (informational)", budget.value, true)
                    .at(at(&budget))
                    .with_detail("Richardson estimate of the grid-residual error"),
            );
        }
        Err(e) => cert.push(Check::new(format!("grid residual: {e}"), f64::NAN, false)),
    }
    cert.push(
        Check::ratio("||T 0|| <= D_bar delta", exact_ratio(r.t0_norm, r.d_bar * r.delta + quad))
            .with_detail("worst lhs/rhs; rhs includes the quadrature estimate"),
    );
    cert.push(
        Check::new("fixed-point residual", r.fp_residual, r.fp_residual <= r.tol.max(REL_TOL * r.t0_norm))
            .with_detail("||T z - z|| in the adapted sup norm, allowed max(tol, 1e-8 ||T 0||)"),
    );
    if let Some(q) = r.quadrature_estimate {
        cert.push(
            Check::new("quadrature estimate (informational)", q, true).with_detail("Richardson, adapted sup norm"),
        );
    }
    cert.flag("grid-node-wise: between-node behavior is not certified");
    push_flags(&mut cert, r);
    cert
}

/// `sup |T z1 - T z2| / sup |z1 - z2|` in the adapted sup norm.
pub fn contraction_ratio_continuous(op: &ContinuousOperator<'_>, z1: &[DVector<f64>], z2: &[DVector<f64>]) -> f64 {
    let num = op.norm.sup_norm(&sub(&op.apply(z1), &op.apply(z2)));
    exact_ratio(num, op.norm.sup_norm(&sub(z1, z2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Norm;
    use crate::linear_continuous::{ContinuousProjectionField, EvolutionFamily};
    use crate::linear_discrete::DichotomyConstants;
    use crate::nonlinearity::Profile;
    use crate::rates::{make_rate, RateKind, RateParams};
    use approx::assert_relative_eq;

    /// `x' = a x` on `[0, t_max]` with rate `e^t`.
    fn scalar(a: f64, proj: (usize, usize), t_max: f64, c: f64) -> ContinuousSystem {
        let family = EvolutionFamily::closed_form(
            1,
            move |t, s| DMatrix::from_element(1, 1, (a * (t - s)).exp()),
            move |_| DMatrix::from_element(1, 1, a),
        );
        let lambda = if proj == (0, 0) { 1.0 } else { a.abs() };
        let rate = make_rate(RateKind::Exponential, &RateParams::default()).unwrap();
        let lin = ContinuousDichotomy::new(
            family,
            ContinuousProjectionField::constant(Projections::coordinate(1, proj.0, proj.1)),
            rate.clone(),
            DichotomyConstants::new(1.0, lambda, 0.0).unwrap(),
            t_max,
        )
        .unwrap();
        let f = ContinuousNonlinearity::weighted(Profile::SinComponents, c, &rate, 0.0, Norm::Euclidean);
        ContinuousSystem::new(lin, f)
    }

    fn uniform(t_max: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|i| t_max * i as f64 / n as f64).collect()
    }

    #[test]
    fn fd_derivative_is_exact_on_quadratics() {
        let t: Vec<f64> = vec![0.0, 0.1, 0.35, 0.4, 1.0];
        let v: Vec<DVector<f64>> = t.iter().map(|&s| DVector::from_element(1, 3.0 * s * s - s + 2.0)).collect();
        for (s, d) in t.iter().zip(fd_derivative(&t, &v)) {
            assert_relative_eq!(d[0], 6.0 * s - 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn coarse_grid_keeps_the_end() {
        assert_eq!(coarse_indices(5), vec![0, 2, 4]);
        assert_eq!(coarse_indices(6), vec![0, 2, 4, 5]);
    }

    #[test]
    fn exact_solution_maps_to_zero() {
        let sys = scalar(-1.0, (1, 0), 5.0, 0.0);
        let grid = uniform(5.0, 100);
        let y: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, (-t).exp())).collect();
        let yp: Vec<_> = y.iter().map(|v| -v).collect();
        let po = ContinuousPseudoOrbit::new(grid.clone(), y, Some(yp), &sys).unwrap();
        assert_eq!(po.delta, 0.0);
        let zeros = vec![DVector::zeros(1); grid.len()];
        let out = apply_t_continuous(&zeros, &po, &sys, &QuadraturePolicy::default(), None).unwrap();
        assert!(out.tz.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn stable_integral_matches_fine_quadrature() {
        // y = y_exact + eps, so g = -eps (constant) and (T0)(t) = -eps (1 - e^{-t}).
        let sys = scalar(-1.0, (1, 0), 4.0, 0.0);
        let eps = 1e-3;
        let grid = uniform(4.0, 400);
        let y: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, (-t).exp() + eps)).collect();
        let yp: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, -(-t).exp())).collect();
        let po = ContinuousPseudoOrbit::new(grid.clone(), y, Some(yp), &sys).unwrap();
        let zeros = vec![DVector::zeros(1); grid.len()];
        let out = apply_t_continuous(&zeros, &po, &sys, &QuadraturePolicy::default(), None).unwrap();
        // Independent oracle: trapezoid on a 20x finer grid of int_0^t e^{-(t-s)} (-eps) ds.
        for (k, &t) in grid.iter().enumerate().step_by(37) {
            let m = 20 * k.max(1);
            let h = t / m as f64;
            let oracle: f64 = (0..=m)
                .map(|i| {
                    let w = if i == 0 || i == m { 0.5 } else { 1.0 };
                    w * h * (-(t - i as f64 * h)).exp() * -eps
                })
                .sum();
            // Trapezoid error of the coarse rule: at most t h^2 / 12 times the integrand scale.
            assert_relative_eq!(out.tz[k][0], oracle, epsilon = t * 1e-4 / 12.0 * eps);
            assert_relative_eq!(out.tz[k][0], -eps * (1.0 - (-t).exp()), epsilon = 1e-5 * eps);
        }
        let err = grid.iter().zip(&out.tz).map(|(&t, v)| (v[0] + eps * (1.0 - (-t).exp())).abs()).fold(0.0, f64::max);
        assert!(
            out.quadrature_estimate > 0.3 * err && out.quadrature_estimate < 3.0 * err,
            "{} vs {err}",
            out.quadrature_estimate
        );
    }

    #[test]
    fn all_center_operator_is_minus_defect() {
        let sys = scalar(0.3, (0, 0), 2.0, 0.0);
        let grid = uniform(2.0, 20);
        let y: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, t.sin())).collect();
        let yp: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, t.cos())).collect();
        let po = ContinuousPseudoOrbit::new(grid.clone(), y.clone(), Some(yp.clone()), &sys).unwrap();
        let zeros = vec![DVector::zeros(1); grid.len()];
        let tz = apply_t_continuous(&zeros, &po, &sys, &QuadraturePolicy::default(), None).unwrap().tz;
        for k in 0..grid.len() {
            assert_relative_eq!(tz[k][0], -(0.3 * y[k][0] - yp[k][0]), max_relative = 1e-14);
        }
    }

    #[test]
    fn nonlinear_stable_shadow_verifies() {
        let sys = scalar(-1.0, (1, 0), 6.0, 0.1);
        let grid = uniform(6.0, 600);
        let y: Vec<_> =
            grid.iter().map(|&t| DVector::from_element(1, 0.5 * (-t).exp() + 1e-3 * (3.0 * t).sin())).collect();
        let po = ContinuousPseudoOrbit::new(grid, y, None, &sys).unwrap();
        assert!(po.differentiated && po.delta > 0.0);
        let r = solve_shadow_continuous(&po, &sys, &ContinuousSolveOptions::default()).unwrap();
        assert!(r.iterations > 1);
        let cert = verify_shadow_continuous(&r, &po, &sys);
        assert!(cert.overall, "{cert:#?}");
    }

    #[test]
    fn unstable_needs_long_window() {
        let sys = scalar(1.0, (0, 1), 3.0, 0.0);
        let grid = uniform(3.0, 60);
        let y: Vec<_> = grid.iter().map(|_| DVector::from_element(1, 1e-3)).collect();
        let po = ContinuousPseudoOrbit::new(grid, y, None, &sys).unwrap();
        let r = solve_shadow_continuous(&po, &sys, &ContinuousSolveOptions::default());
        assert!(matches!(r, Err(Error::TailBoundTooLarge { .. })));
    }

    #[test]
    fn unstable_linear_shadow_verifies() {
        let sys = scalar(1.0, (0, 1), 20.0, 0.0);
        let grid = uniform(20.0, 800);
        let y: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, 1e-3 * t.cos())).collect();
        let po = ContinuousPseudoOrbit::new(grid, y, None, &sys).unwrap();
        let r = solve_shadow_continuous(&po, &sys, &ContinuousSolveOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        let cert = verify_shadow_continuous(&r, &po, &sys);
        assert!(cert.overall, "{cert:#?}");
    }
}
