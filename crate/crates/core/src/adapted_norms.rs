//! Time-indexed adapted norms `|x|_n` built from a dichotomy, evaluated on the nodes of a finite
//! window, and sampled verification of their three basic inequalities.
//!
//! The same structure serves discrete cocycles (nodes `n = 0..=N`) and continuous families
//! restricted to a grid `t_0 < .. < t_K`; in both cases the stable sup runs over the nodes of
//! the window only.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::certificate::{exact_ratio, Certificate, Check, Worst};
use crate::error::{Error, Result};
use crate::linalg::{projection_rank, range_direction, Fiber, Norm, Projections};
use crate::linear_continuous::ContinuousDichotomy;
use crate::linear_discrete::{DichotomyConstants, DiscreteDichotomy};
use crate::TimeMode;

/// Relative tolerance for "x lies in the fiber".
pub const FIBER_TOL: f64 = 1e-8;
/// A truncated sup is flagged approximate when its upper bound exceeds it by this fraction.
pub const APPROXIMATE_GAP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormValue {
    pub value: f64,
    /// Upper bound for the sup over the untruncated future, `max(value, D nu^d |x|)`.
    pub upper_bound: f64,
    pub approximate: bool,
}

impl NormValue {
    fn exact(value: f64) -> Self {
        Self { value, upper_bound: value, approximate: false }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptedNorm {
    pub mode: TimeMode,
    /// Node times: `n` as a float in discrete time, grid times in continuous time.
    pub times: Vec<f64>,
    pub projections: Vec<Projections>,
    /// Stable one-step maps `A_k P1_k` (node `k` to `k + 1`).
    pub fwd: Vec<DMatrix<f64>>,
    /// Unstable one-step pullbacks `A(k, k+1) P2_{k+1}` (node `k + 1` to `k`).
    pub bwd: Vec<DMatrix<f64>>,
    /// `mu^lambda` at each node.
    pub mu_l: Vec<f64>,
    /// `nu^d` at each node.
    pub nu_d: Vec<f64>,
    /// Center weight at each node.
    pub center_w: Vec<f64>,
    pub constants: DichotomyConstants,
    pub norm: Norm,
    stable_gain: Option<Vec<f64>>,
    unstable_gain: Option<Vec<f64>>,
}

impl AdaptedNorm {
    pub fn discrete(sys: &DiscreteDichotomy) -> Result<Self> {
        let big_n = sys.horizon();
        let k = sys.constants;
        let projections: Vec<Projections> = sys.projections.nodes()[..=big_n].to_vec();
        // re-projecting each step keeps roundoff out of the unstable directions
        let fwd = (0..big_n).map(|n| &projections[n + 1].p1 * sys.cocycle.matrix(n) * &projections[n].p1).collect();
        let bwd = sys.step_pullbacks()?;
        let mu_l = (0..=big_n).map(|n| sys.rates.mu(n).powf(k.lambda)).collect();
        let nu_d = (0..=big_n).map(|n| sys.rates.nu(n).powf(k.d)).collect();
        let center_w = (0..=big_n).map(|n| sys.rates.center_weight(n, k.lambda)).collect();
        let times = (0..=big_n).map(|n| n as f64).collect();
        Ok(Self::assemble(TimeMode::Discrete, times, projections, fwd, bwd, mu_l, nu_d, center_w, k, sys.norm()))
    }

    /// Adapted norm of a continuous dichotomy restricted to `grid`.
    pub fn continuous(sys: &ContinuousDichotomy, grid: &[f64]) -> Result<Self> {
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) || grid[0] < 0.0 {
            return Err(Error::InvalidInput(
                "continuous adapted norm needs a strictly increasing grid in [0, inf)".into(),
            ));
        }
        let k = sys.constants;
        let projections: Vec<Projections> = grid.iter().map(|&t| sys.projections.at(t)).collect();
        let steps: Vec<(DMatrix<f64>, DMatrix<f64>)> = grid
            .par_windows(2)
            .enumerate()
            .map(|(i, w)| {
                let fwd = &projections[i + 1].p1 * sys.family.t(w[1], w[0]) * &projections[i].p1;
                let bwd = &projections[i].p2 * sys.family.t(w[0], w[1]) * &projections[i + 1].p2;
                (fwd, bwd)
            })
            .collect();
        let (fwd, bwd) = steps.into_iter().unzip();
        let mu_l = grid.iter().map(|&t| sys.rate.mu(t).powf(k.lambda)).collect();
        let nu_d = grid.iter().map(|&t| sys.rate.nu(t).powf(k.d)).collect();
        let center_w = grid.iter().map(|&t| sys.rate.center_weight(t)).collect();
        Ok(Self::assemble(
            TimeMode::Continuous,
            grid.to_vec(),
            projections,
            fwd,
            bwd,
            mu_l,
            nu_d,
            center_w,
            k,
            sys.norm(),
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        mode: TimeMode,
        times: Vec<f64>,
        projections: Vec<Projections>,
        fwd: Vec<DMatrix<f64>>,
        bwd: Vec<DMatrix<f64>>,
        mu_l: Vec<f64>,
        nu_d: Vec<f64>,
        center_w: Vec<f64>,
        constants: DichotomyConstants,
        norm: Norm,
    ) -> Self {
        let mut s = Self {
            mode,
            times,
            projections,
            fwd,
            bwd,
            mu_l,
            nu_d,
            center_w,
            constants,
            norm,
            stable_gain: None,
            unstable_gain: None,
        };
        s.stable_gain = s.rank_one_gains(Fiber::Stable);
        s.unstable_gain = s.rank_one_gains(Fiber::Unstable);
        s
    }

    /// Index of the last node.
    pub fn last(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.projections[0].dim()
    }

    /// For fibers that are lines at every node, `|x|_n = G_n |x|` with `G_n` computed by a
    /// one-pass recursion along the window.
    fn rank_one_gains(&self, fiber: Fiber) -> Option<Vec<f64>> {
        let last = self.last();
        let mut dirs = Vec::with_capacity(last + 1);
        for p in &self.projections {
            let pf = p.get(fiber);
            if projection_rank(pf) != 1 {
                return None;
            }
            let e = range_direction(pf)?;
            let len = self.norm.vector(&e);
            dirs.push(e / len);
        }
        let mut g = vec![1.0; last + 1];
        match fiber {
            Fiber::Stable => {
                for k in (0..last).rev() {
                    let gain = self.norm.vector(&(&self.fwd[k] * &dirs[k]));
                    g[k] = f64::max(1.0, gain * (self.mu_l[k + 1] / self.mu_l[k]) * g[k + 1]);
                }
            }
            Fiber::Unstable => {
                for k in 1..=last {
                    let gain = self.norm.vector(&(&self.bwd[k - 1] * &dirs[k]));
                    g[k] = f64::max(1.0, gain * (self.mu_l[k] / self.mu_l[k - 1]) * g[k - 1]);
                }
            }
            Fiber::Center => return None,
        }
        g.iter().all(|v| v.is_finite()).then_some(g)
    }

    /// `|x|_n` for `x` in one fiber. Fails with `FiberMismatch` when `x` is not in that fiber.
    pub fn norm_component(&self, x: &DVector<f64>, n: usize, fiber: Fiber) -> Result<NormValue> {
        if n > self.last() {
            return Err(Error::IndexOutOfRange(format!("node {n} outside [0, {}]", self.last())));
        }
        let p = self.projections[n].get(fiber);
        let defect = self.norm.vector(&(x - p * x));
        let size = self.norm.vector(x);
        if defect > FIBER_TOL * size {
            return Err(Error::FiberMismatch { fiber: fiber.name(), node: n, defect: defect / size });
        }
        Ok(self.component(x, n, fiber))
    }

    /// [`Self::norm_component`] without the fiber check.
    pub fn component(&self, x: &DVector<f64>, n: usize, fiber: Fiber) -> NormValue {
        let size = self.norm.vector(x);
        if size == 0.0 {
            return NormValue::exact(0.0);
        }
        match fiber {
            Fiber::Center => NormValue::exact(self.center_w[n] * size),
            Fiber::Stable => {
                let value = match &self.stable_gain {
                    Some(g) => g[n] * size,
                    None => self.stable_sup(x, n, size),
                };
                let bound = self.constants.big_d * self.nu_d[n] * size;
                let upper = value.max(bound);
                NormValue {
                    value,
                    upper_bound: upper,
                    approximate: n < self.last() && upper - value > APPROXIMATE_GAP * value,
                }
            }
            Fiber::Unstable => NormValue::exact(match &self.unstable_gain {
                Some(g) => g[n] * size,
                None => self.unstable_sup(x, n, size),
            }),
        }
    }

    fn stable_sup(&self, x: &DVector<f64>, n: usize, size: f64) -> f64 {
        let mut best = size;
        let mut v = x.clone();
        let mut w = DVector::zeros(x.len());
        for m in n..self.last() {
            self.fwd[m].mul_to(&v, &mut w);
            std::mem::swap(&mut v, &mut w);
            best = best.max(self.norm.vector(&v) * self.mu_l[m + 1] / self.mu_l[n]);
        }
        best
    }

    fn unstable_sup(&self, x: &DVector<f64>, n: usize, size: f64) -> f64 {
        let mut best = size;
        let mut v = x.clone();
        let mut w = DVector::zeros(x.len());
        for m in (0..n).rev() {
            self.bwd[m].mul_to(&v, &mut w);
            std::mem::swap(&mut v, &mut w);
            best = best.max(self.norm.vector(&v) * self.mu_l[n] / self.mu_l[m]);
        }
        best
    }

    /// `|x|_n = |P1_n x|_n + |P2_n x|_n + |P3_n x|_n`.
    pub fn adapted_norm(&self, x: &DVector<f64>, n: usize) -> f64 {
        self.adapted_norm_value(x, n).value
    }

    pub fn adapted_norm_value(&self, x: &DVector<f64>, n: usize) -> NormValue {
        let p = &self.projections[n];
        let parts = [
            self.component(&(&p.p1 * x), n, Fiber::Stable),
            self.component(&(&p.p2 * x), n, Fiber::Unstable),
            self.component(&(&p.p3 * x), n, Fiber::Center),
        ];
        NormValue {
            value: parts.iter().map(|v| v.value).sum(),
            upper_bound: parts.iter().map(|v| v.upper_bound).sum(),
            approximate: parts.iter().any(|v| v.approximate),
        }
    }

    /// `sup_n |z_n|_n` over the window.
    pub fn sup_norm(&self, z: &[DVector<f64>]) -> f64 {
        z.par_iter()
            .enumerate()
            .map(|(n, v)| self.adapted_norm(v, n))
            .reduce(|| 0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
    }

    /// Whether any node's stable sup is only a lower bound for the untruncated one, on the
    /// given sequence.
    pub fn any_approximate(&self, z: &[DVector<f64>]) -> bool {
        z.par_iter().enumerate().any(|(n, v)| self.adapted_norm_value(v, n).approximate)
    }

    /// `A(m, n) x` for `m >= n` along the stable fiber.
    pub fn stable_transport(&self, x: &DVector<f64>, n: usize, m: usize) -> DVector<f64> {
        let mut v = &self.projections[n].p1 * x;
        for k in n..m {
            v = &self.fwd[k] * v;
        }
        v
    }

    /// `A(m, n) x` for `m <= n` along the unstable fiber.
    pub fn unstable_transport(&self, x: &DVector<f64>, n: usize, m: usize) -> DVector<f64> {
        let mut v = &self.projections[n].p2 * x;
        for k in (m..n).rev() {
            v = &self.bwd[k] * v;
        }
        v
    }
}

/// Samples `samples` random vectors and node pairs and checks
/// `|x| <= |x|_n` on the stable and unstable fibers,
/// `|A(m, n) P1_n x|_m <= D (mu_m / mu_n)^{-lambda} nu_n^d |x|` for `m >= n`, and
/// `|A(m, n) P2_n x|_m <= D (mu_n / mu_m)^{-lambda} nu_n^d |x|` for `m <= n`.
pub fn verify_norm_lemma(norm: &AdaptedNorm, samples: usize, seed: u64) -> Certificate {
    let last = norm.last();
    let mut cert = Certificate::new(match norm.mode {
        TimeMode::Discrete => format!("n in [0, {last}], {samples} samples"),
        TimeMode::Continuous => format!("grid nodes t in [{}, {}], {samples} samples", norm.times[0], norm.times[last]),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(usize, usize, DVector<f64>)> = (0..samples)
        .map(|_| {
            let n = rng.random_range(0..=last);
            let m = rng.random_range(0..=last);
            let scale = 10f64.powf(rng.random_range(-3.0..2.0));
            let x = DVector::from_fn(norm.dim(), |_, _| rng.random_range(-1.0..1.0) * scale);
            (n, m, x)
        })
        .collect();
    let k = norm.constants;
    type W = Worst<(usize, usize)>;
    let (ln, ln1, ln2) = draws
        .par_iter()
        .map(|(n, m, x)| {
            let (n, m) = (*n, *m);
            let (mut ln, mut ln1, mut ln2) = (W::new(), W::new(), W::new());
            let size = norm.norm.vector(x);
            let p = &norm.projections[n];
            for (fiber, part) in [(Fiber::Stable, &p.p1 * x), (Fiber::Unstable, &p.p2 * x)] {
                let adapted = norm.component(&part, n, fiber).value;
                ln.update(exact_ratio(norm.norm.vector(&part), adapted), (n, n));
            }
            let (lo, hi) = (n.min(m), n.max(m));
            let v = norm.stable_transport(x, lo, hi);
            let lhs = norm.component(&v, hi, Fiber::Stable).value;
            let rhs = k.big_d * (norm.mu_l[hi] / norm.mu_l[lo]).recip() * norm.nu_d[lo] * size;
            ln1.update(exact_ratio(lhs, rhs), (hi, lo));
            let v = norm.unstable_transport(x, hi, lo);
            let lhs = norm.component(&v, lo, Fiber::Unstable).value;
            let rhs = k.big_d * (norm.mu_l[hi] / norm.mu_l[lo]).recip() * norm.nu_d[hi] * size;
            ln2.update(exact_ratio(lhs, rhs), (lo, hi));
            (ln, ln1, ln2)
        })
        .reduce(|| (W::new(), W::new(), W::new()), |a, b| (a.0.merge(b.0), a.1.merge(b.1), a.2.merge(b.2)));
    let label = |(m, n): (usize, usize)| format!("(m, n) = ({m}, {n})");
    for (name, w) in [
        ("|x| <= |x|_n on stable and unstable fibers", ln),
        ("stable transport bound in adapted norm", ln1),
        ("unstable transport bound in adapted norm", ln2),
    ] {
        let mut c = Check::ratio(name, w.value);
        if let Some(at) = w.at {
            c = c.at(label(at));
        }
        cert.push(c);
    }
    cert
}
