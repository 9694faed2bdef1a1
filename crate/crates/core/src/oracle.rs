//! Dense boundary-value solver for small discrete instances.
//!
//! The fixed point of `T` on `[0, N]` is characterized through `z_bar_n = (I - P3_n) z_n` by
//!
//! ```text
//! z_bar_{n+1} - A_n z_bar_n - (P1_{n+1} + P2_{n+1}) g_n(z_bar_n) = 0,   n < N
//! P1_0 z_bar_0 = 0,   P2_N z_bar_N = 0,   P3_n z_bar_n = 0
//! ```
//!
//! with `g_n = A_n y_n + f_n(y_n + z_bar_n) - y_{n+1}`. The stacked system is solved in the least
//! squares sense (it is consistent), by one SVD solve when `f = 0` and by Newton otherwise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Norm, Projections};
use crate::linear_discrete::{fit_min_d, DichotomyConstants, DiscreteCocycle, DiscreteDichotomy, ProjectionField};
use crate::nonlinearity::{Nonlinearity, Profile};
use crate::rates::{make_rate, sample_rate, RateKind, RateParams};
use crate::shadow_discrete::{check_shape, DiscreteOperator, DiscreteSystem, PseudoOrbit};

pub const MAX_UNKNOWNS: usize = 10_000;
/// Ratio of extreme singular values below which the assembly is treated as singular.
const SINGULAR_RATIO: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 50;

pub struct BvpInstance<'a> {
    pub sys: &'a DiscreteSystem,
    pub y: &'a PseudoOrbit,
}

#[derive(Debug, Clone)]
pub struct BvpSolution {
    pub z: Vec<DVector<f64>>,
    pub z_bar: Vec<DVector<f64>>,
    pub x: Vec<DVector<f64>>,
    /// `||z - T z||` in the adapted sup norm.
    pub residual: f64,
    pub newton_iterations: usize,
}

struct Assembly<'a> {
    sys: &'a DiscreteSystem,
    y: &'a [DVector<f64>],
    dim: usize,
    big_n: usize,
}

impl Assembly<'_> {
    fn unknowns(&self) -> usize {
        self.dim * (self.big_n + 1)
    }

    fn rows(&self) -> usize {
        self.dim * (self.big_n + 2) + self.unknowns()
    }

    fn node(&self, v: &DVector<f64>, n: usize) -> DVector<f64> {
        v.rows(n * self.dim, self.dim).into_owned()
    }

    fn g(&self, n: usize, zb: &DVector<f64>) -> DVector<f64> {
        self.sys.step(n, &(&self.y[n] + zb)) - self.sys.linear.cocycle.matrix(n) * zb - &self.y[n + 1]
    }

    /// Stacked equations at `v`.
    fn residual(&self, v: &DVector<f64>) -> DVector<f64> {
        let (dim, big_n) = (self.dim, self.big_n);
        let mut out = DVector::zeros(self.rows());
        for n in 0..big_n {
            let (zn, zn1) = (self.node(v, n), self.node(v, n + 1));
            let p = self.sys.projections(n + 1);
            let e = &zn1 - self.sys.linear.cocycle.matrix(n) * &zn - (&p.p1 + &p.p2) * self.g(n, &zn);
            out.rows_mut(n * dim, dim).copy_from(&e);
        }
        let r0 = big_n * dim;
        out.rows_mut(r0, dim).copy_from(&(&self.sys.projections(0).p1 * self.node(v, 0)));
        out.rows_mut(r0 + dim, dim).copy_from(&(&self.sys.projections(big_n).p2 * self.node(v, big_n)));
        let r1 = r0 + 2 * dim;
        for n in 0..=big_n {
            out.rows_mut(r1 + n * dim, dim).copy_from(&(&self.sys.projections(n).p3 * self.node(v, n)));
        }
        out
    }

    /// Jacobian: linear blocks exact, `D f_n` by central differences.
    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let (dim, big_n) = (self.dim, self.big_n);
        let mut j = DMatrix::zeros(self.rows(), self.unknowns());
        let eye = DMatrix::<f64>::identity(dim, dim);
        let nonlinear = self.sys.f.lipschitz_c != 0.0;
        for n in 0..big_n {
            let a = self.sys.linear.cocycle.matrix(n);
            let p = self.sys.projections(n + 1);
            let p12 = &p.p1 + &p.p2;
            let mut block = -a.clone();
            if nonlinear {
                let x = &self.y[n] + self.node(v, n);
                let mut df = DMatrix::zeros(dim, dim);
                for k in 0..dim {
                    let h = 1e-6 * x[k].abs().max(1.0);
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[k] += h;
                    xm[k] -= h;
                    df.set_column(k, &((self.sys.f.eval(n, &xp) - self.sys.f.eval(n, &xm)) / (2.0 * h)));
                }
                block -= &p12 * df;
            }
            j.view_mut((n * dim, n * dim), (dim, dim)).copy_from(&block);
            j.view_mut((n * dim, (n + 1) * dim), (dim, dim)).copy_from(&eye);
        }
        let r0 = big_n * dim;
        j.view_mut((r0, 0), (dim, dim)).copy_from(&self.sys.projections(0).p1);
        j.view_mut((r0 + dim, big_n * dim), (dim, dim)).copy_from(&self.sys.projections(big_n).p2);
        let r1 = r0 + 2 * dim;
        for n in 0..=big_n {
            j.view_mut((r1 + n * dim, n * dim), (dim, dim)).copy_from(&self.sys.projections(n).p3);
        }
        j
    }
}

/// Least-squares solve of `J dx = rhs` after row equilibration.
fn lstsq(mut j: DMatrix<f64>, mut rhs: DVector<f64>) -> Result<DVector<f64>> {
    for i in 0..j.nrows() {
        let s = j.row(i).amax();
        if s > 0.0 {
            j.row_mut(i).scale_mut(1.0 / s);
            rhs[i] /= s;
        }
    }
    let sv = j.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > SINGULAR_RATIO * smax) {
        return Err(Error::SingularAssembly(format!("singular value ratio {:e}", smin / smax)));
    }
    // full column rank, so a thin QR solves the least-squares problem
    let qr = j.qr();
    let qtb = qr.q().transpose() * rhs;
    qr.r().solve_upper_triangular(&qtb).ok_or_else(|| Error::SingularAssembly("zero pivot in R".into()))
}

pub fn bvp_solve(inst: &BvpInstance<'_>) -> Result<BvpSolution> {
    bvp_solve_from(inst, None)
}

/// Newton from `start` (`z_bar`, default 0); one step is exact when `f = 0`.
pub fn bvp_solve_from(inst: &BvpInstance<'_>, start: Option<&[DVector<f64>]>) -> Result<BvpSolution> {
    let sys = inst.sys;
    let (dim, big_n) = (sys.dim(), sys.horizon());
    check_shape(&inst.y.y, big_n + 1, dim, "pseudo-orbit")?;
    let asm = Assembly { sys, y: &inst.y.y, dim, big_n };
    if asm.unknowns() > MAX_UNKNOWNS {
        return Err(Error::InvalidInput(format!("{} unknowns exceed the dense limit {MAX_UNKNOWNS}", asm.unknowns())));
    }
    let mut v = DVector::zeros(asm.unknowns());
    if let Some(s) = start {
        check_shape(s, big_n + 1, dim, "start")?;
        for (n, zb) in s.iter().enumerate() {
            v.rows_mut(n * dim, dim).copy_from(zb);
        }
    }
    let linear = sys.f.lipschitz_c == 0.0;
    let mut iterations = 0;
    let mut res = asm.residual(&v);
    let scale = inst.y.y.iter().map(|y| y.amax()).fold(1.0, f64::max);
    loop {
        let step = lstsq(asm.jacobian(&v), -&res)?;
        v += &step;
        iterations += 1;
        let prev = res.amax();
        res = asm.residual(&v);
        if linear || step.amax() <= 1e-15 * scale.max(v.amax()) || res.amax() <= 1e-16 * scale {
            break;
        }
        if iterations >= NEWTON_MAX_ITER || (iterations > 5 && res.amax() >= prev) {
            return Err(Error::NewtonStalled { residual: res.amax(), iterations });
        }
    }
    let z_bar: Vec<DVector<f64>> = (0..=big_n).map(|n| asm.node(&v, n)).collect();
    let z: Vec<DVector<f64>> =
        (0..=big_n)
            .map(|n| {
                if n == 0 {
                    z_bar[0].clone()
                } else {
                    &z_bar[n] - &sys.projections(n).p3 * asm.g(n - 1, &z_bar[n - 1])
                }
            })
            .collect();
    let x = inst.y.y.iter().zip(&z_bar).map(|(y, zb)| y + zb).collect();
    let op = DiscreteOperator::new(sys, &inst.y.y)?;
    let tz = op.apply(&z);
    let residual = op.norm.sup_norm(&z.iter().zip(&tz).map(|(a, b)| a - b).collect::<Vec<_>>());
    Ok(BvpSolution { z, z_bar, x, residual, newton_iterations: iterations })
}

/// `max_n |a_n - b_n|` (Euclidean).
pub fn compare(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(u, v)| u.len() != v.len()) {
        return Err(Error::ShapeMismatch(format!("sequences of lengths {} and {} differ in shape", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(u, v)| (u - v).norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSpec {
    pub dim: usize,
    pub horizon: usize,
    /// Dimension of the center block (0, 1 or 2).
    pub center: usize,
    /// Target `q = c (4D + 1)`.
    pub q: f64,
    /// Amplitude of the pseudo-orbit.
    pub noise: f64,
}

/// A random conjugated block-diagonal system `A_n = Q_{n+1} B_n Q_n^{-1}` with stable, unstable
/// and center (rotation or sign) blocks, `mu_n = e^n`, fitted `D`, `c` set for the target `q`, and
/// uniform noise of size `noise` as pseudo-orbit.
pub fn random_instance(seed: u64, spec: RandomSpec) -> Result<(DiscreteSystem, PseudoOrbit)> {
    let RandomSpec { dim, horizon, center, q, noise } = spec;
    if center > 2 || dim < center + 2 || dim > 8 {
        return Err(Error::InvalidInput(format!(
            "need 2 + center <= dim <= 8 and center <= 2, got dim {dim}, center {center}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hyper = dim - center;
    let ns = rng.random_range(1..hyper);
    let nu = hyper - ns;
    let stable: Vec<f64> = (0..ns).map(|_| rng.random_range(0.1..0.5)).collect();
    let unstable: Vec<f64> = (0..nu).map(|_| rng.random_range(2.0..6.0)).collect();
    let lambda = stable.iter().map(|s| -s.ln()).chain(unstable.iter().map(|u| u.ln())).fold(f64::INFINITY, f64::min);
    let qs: Vec<DMatrix<f64>> = (0..=horizon + 1)
        .map(|_| DMatrix::identity(dim, dim) + DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.1..0.1)))
        .collect();
    let q_inv: Vec<DMatrix<f64>> = qs.iter().map(|q| q.clone().try_inverse().expect("near-identity matrix")).collect();
    let mats: Vec<DMatrix<f64>> = (0..horizon)
        .map(|n| {
            let mut b = DMatrix::zeros(dim, dim);
            for (i, s) in stable.iter().enumerate() {
                b[(i, i)] = *s;
            }
            for (i, u) in unstable.iter().enumerate() {
                b[(ns + i, ns + i)] = *u;
            }
            match center {
                1 => b[(hyper, hyper)] = if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                2 => {
                    let (s, c) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
                    b[(hyper, hyper)] = c;
                    b[(hyper, hyper + 1)] = -s;
                    b[(hyper + 1, hyper)] = s;
                    b[(hyper + 1, hyper + 1)] = c;
                }
                _ => {}
            }
            &qs[n + 1] * b * &q_inv[n]
        })
        .collect();
    let base = Projections::coordinate(dim, ns, nu);
    let projections = ProjectionField::from_nodes((0..=horizon).map(|n| base.conjugate(&qs[n], &q_inv[n])).collect())?;
    let cocycle = DiscreteCocycle::from_matrices(mats)?;
    let rates = sample_rate(&make_rate(RateKind::Exponential, &RateParams::default())?, horizon)?;
    let big_d = fit_min_d(&cocycle, &projections, &rates, lambda, 0.0)? * (1.0 + 1e-9);
    let constants = DichotomyConstants::new(big_d, lambda, 0.0)?;
    let linear = DiscreteDichotomy::new(cocycle, projections, rates.clone(), constants)?;
    let c = q / (4.0 * big_d + 1.0);
    let f = Nonlinearity::weighted(Profile::SinComponents, c, &rates, lambda, 0.0, Norm::Euclidean);
    let sys = DiscreteSystem::new(linear, f);
    let y = (0..=horizon).map(|_| DVector::from_fn(dim, |_, _| noise * rng.random_range(-1.0..1.0))).collect();
    let po = PseudoOrbit::new(y, &sys)?;
    Ok((sys, po))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples::example_half_double;
    use crate::shadow_discrete::{solve_shadow, SolveOptions};
    use approx::assert_relative_eq;

    fn scalar_stable(big_n: usize) -> DiscreteSystem {
        let rates = sample_rate(&make_rate(RateKind::Exponential, &RateParams::default()).unwrap(), big_n).unwrap();
        let m = DMatrix::from_element(1, 1, 0.5);
        let linear = DiscreteDichotomy::new(
            DiscreteCocycle::from_generator(big_n, move |_| m.clone()).unwrap(),
            ProjectionField::constant(Projections::coordinate(1, 1, 0), big_n),
            rates,
            DichotomyConstants::new(1.0, std::f64::consts::LN_2, 0.0).unwrap(),
        )
        .unwrap();
        DiscreteSystem::new(linear, Nonlinearity::zero())
    }

    #[test]
    fn scalar_chain_is_a_geometric_sum() {
        // Exact orbit 0.5^n, with the tail from index 4 shifted by eta: g_3 = -eta.
        let big_n = 10;
        let sys = scalar_stable(big_n);
        let eta = 1e-3;
        let y: Vec<_> = (0..=big_n)
            .map(|n| {
                DVector::from_element(
                    1,
                    0.5f64.powi(n as i32) + if n >= 4 { eta * 0.5f64.powi(n as i32 - 4) } else { 0.0 },
                )
            })
            .collect();
        let po = PseudoOrbit::new(y, &sys).unwrap();
        let sol = bvp_solve(&BvpInstance { sys: &sys, y: &po }).unwrap();
        for n in 0..=big_n {
            let want = if n >= 4 { -eta * 0.5f64.powi(n as i32 - 4) } else { 0.0 };
            assert_relative_eq!(sol.z[n][0], want, epsilon = 1e-15);
        }
        assert!(sol.residual < 1e-10);
    }

    #[test]
    fn exact_orbit_gives_zero() {
        let sys = scalar_stable(6);
        let y: Vec<_> = (0..=6).map(|n| DVector::from_element(1, 0.5f64.powi(n))).collect();
        let po = PseudoOrbit::new(y, &sys).unwrap();
        let sol = bvp_solve(&BvpInstance { sys: &sys, y: &po }).unwrap();
        assert!(sol.z.iter().all(|z| z[0].abs() < 1e-300));
    }

    #[test]
    fn half_double_impulse_matches_solver() {
        let named = example_half_double(40).unwrap();
        let sys = named.discrete().unwrap();
        let mut y = vec![DVector::from_vec(vec![1.0, 0.0])];
        for n in 0..40 {
            let next = sys.step(n, &y[n]);
            y.push(next);
        }
        y[5][0] += 1e-3;
        y[5][1] += 1e-3;
        let po = PseudoOrbit::new(y, sys).unwrap();
        let sol = bvp_solve(&BvpInstance { sys, y: &po }).unwrap();
        let r = solve_shadow(&po, sys, &SolveOptions::default()).unwrap();
        assert!(compare(&sol.x, &r.x).unwrap() < 1e-8);
    }

    #[test]
    fn random_center_instance_matches_solver() {
        let spec = RandomSpec { dim: 3, horizon: 32, center: 1, q: 0.04, noise: 1e-3 };
        let (sys, po) = random_instance(11, spec).unwrap();
        let sol = bvp_solve(&BvpInstance { sys: &sys, y: &po }).unwrap();
        assert!(sol.residual < 1e-8, "{}", sol.residual);
        let r = solve_shadow(&po, &sys, &SolveOptions::default()).unwrap();
        assert!(compare(&sol.z, &r.z).unwrap() < 1e-8);
    }

    #[test]
    fn compare_examples() {
        let a = vec![DVector::from_vec(vec![1.0, 2.0]); 3];
        assert_eq!(compare(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b[1][0] += 1e-9;
        assert_relative_eq!(compare(&a, &b).unwrap(), 1e-9, max_relative = 1e-6);
        assert!(matches!(compare(&a, &b[..2]), Err(Error::ShapeMismatch(_))));
    }
}
