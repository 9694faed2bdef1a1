//! Second-order equations `x'' = A(t) x' + B(t) x + f(t, x', x)` as first-order systems on the
//! product space, with `C(t)(x1, x2) = (A(t) x1 + B(t) x2, x1)` and the norm `|x1| + |x2|`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::certificate::{exact_ratio, Certificate, Check, Worst};
use crate::error::{Error, Result};
use crate::linalg::Norm;
use crate::linear_continuous::{
    integrate_family, ContinuousDichotomy, ContinuousProjectionField, EvolutionFamily, MatrixFn,
};
use crate::linear_discrete::DichotomyConstants;
use crate::nonlinearity::{ContinuousNonlinearity, Profile};
use crate::rates::RatePair;
use crate::shadow_continuous::{grid_residual, ContinuousPseudoOrbit, ContinuousSystem};
use crate::shadow_discrete::{check_shape, ShadowResult};

pub type SecondOrderMap = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct SecondOrderSystem {
    pub dim: usize,
    a: MatrixFn,
    b: MatrixFn,
    f: SecondOrderMap,
    /// Joint Lipschitz constant of `f` in `(x1, x2)`, relative to `mu'/(mu nu^d)`.
    pub lipschitz_c: f64,
    /// Profile of `f` on the stacked vector `(x1, x2)`, when `f` is built from one.
    pub profile: Option<Profile>,
}

impl fmt::Debug for SecondOrderSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecondOrderSystem").field("dim", &self.dim).field("c", &self.lipschitz_c).finish()
    }
}

impl SecondOrderSystem {
    pub fn new(
        dim: usize,
        a: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        b: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        c: f64,
        f: impl Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, a: Arc::new(a), b: Arc::new(b), f: Arc::new(f), lipschitz_c: c, profile: None }
    }

    /// `f(t, x1, x2) = c w(t) [profile(x1, x2)]_1`, with the weight `mu'/(mu nu^d)` and the first
    /// block of the profile evaluated in the product norm.
    pub fn weighted(
        dim: usize,
        a: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        b: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        profile: Profile,
        c: f64,
        rate: &RatePair,
        d: f64,
    ) -> Self {
        let rate = rate.clone();
        let norm = Norm::BlockSum { block: dim };
        let f = move |t: f64, x1: &DVector<f64>, x2: &DVector<f64>| {
            let v = profile.eval(&stack(x1, x2), norm);
            v.rows(0, dim).into_owned() * (c * rate.weight(t, d))
        };
        let mut s = Self::new(dim, a, b, c, f);
        s.profile = Some(profile);
        s
    }

    pub fn a(&self, t: f64) -> DMatrix<f64> {
        (self.a)(t)
    }

    pub fn b(&self, t: f64) -> DMatrix<f64> {
        (self.b)(t)
    }

    pub fn f(&self, t: f64, x1: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x1, x2)
    }

    /// `x'' - A x' - B x - f(t, x', x)`.
    pub fn residual(&self, t: f64, x: &DVector<f64>, dx: &DVector<f64>, ddx: &DVector<f64>) -> DVector<f64> {
        ddx - self.a(t) * dx - self.b(t) * x - self.f(t, dx, x)
    }
}

pub fn stack(x1: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x1.len() + x2.len(), x1.iter().chain(x2.iter()).copied())
}

/// Splits a product-space vector into `(x1, x2)`.
pub fn split(w: &DVector<f64>, dim: usize) -> (DVector<f64>, DVector<f64>) {
    (w.rows(0, dim).into_owned(), w.rows(dim, dim).into_owned())
}

#[derive(Clone)]
pub struct CompanionSystem {
    /// Dimension of the second-order state; the product space has twice this.
    pub dim: usize,
    c: MatrixFn,
    pub g: ContinuousNonlinearity,
}

impl fmt::Debug for CompanionSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompanionSystem").field("dim", &self.dim).field("g", &self.g).finish()
    }
}

impl CompanionSystem {
    pub fn norm(&self) -> Norm {
        Norm::BlockSum { block: self.dim }
    }

    pub fn matrix(&self, t: f64) -> DMatrix<f64> {
        (self.c)(t)
    }

    pub fn matrix_fn(&self) -> MatrixFn {
        self.c.clone()
    }

    pub fn closed_form_family(
        &self,
        t_eval: impl Fn(f64, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> EvolutionFamily {
        let c = self.c.clone();
        EvolutionFamily::closed_form(2 * self.dim, t_eval, move |t| c(t)).with_norm(self.norm())
    }

    pub fn integrated_family(&self, t_max: f64, h: f64) -> Result<EvolutionFamily> {
        let c = self.c.clone();
        Ok(integrate_family(move |t| c(t), 2 * self.dim, t_max, h)?.with_norm(self.norm()))
    }

    /// Attaches dichotomy data, which must be supplied and is certified separately.
    pub fn into_system(
        self,
        family: EvolutionFamily,
        projections: ContinuousProjectionField,
        rate: RatePair,
        constants: DichotomyConstants,
        t_max: f64,
    ) -> Result<ContinuousSystem> {
        if family.dim() != 2 * self.dim {
            return Err(Error::ShapeMismatch(format!(
                "family has dimension {}, product space has {}",
                family.dim(),
                2 * self.dim
            )));
        }
        let family = family.with_norm(self.norm());
        let linear = ContinuousDichotomy::new(family, projections, rate, constants, t_max)?;
        Ok(ContinuousSystem::new(linear, self.g))
    }
}

/// Companion system with `g(t, x1, x2) = (f(t, x1, x2), 0)`.
pub fn lift(sys2: &SecondOrderSystem) -> CompanionSystem {
    let dim = sys2.dim;
    let (a, b) = (sys2.a.clone(), sys2.b.clone());
    let c: MatrixFn = Arc::new(move |t| {
        let mut m = DMatrix::zeros(2 * dim, 2 * dim);
        m.view_mut((0, 0), (dim, dim)).copy_from(&a(t));
        m.view_mut((0, dim), (dim, dim)).copy_from(&b(t));
        m.view_mut((dim, 0), (dim, dim)).fill_with_identity();
        m
    });
    let f = sys2.f.clone();
    let mut g = ContinuousNonlinearity::custom(sys2.lipschitz_c, move |t, w| {
        let (x1, x2) = split(w, dim);
        stack(&f(t, &x1, &x2), &DVector::zeros(dim))
    });
    if sys2.profile == Some(Profile::SinSum { block: dim }) {
        g.profile = sys2.profile;
    }
    CompanionSystem { dim, c, g }
}

/// `w = (y', y)` with `w' = (y'', y')`.
pub fn lift_pseudo_orbit(
    grid: Vec<f64>,
    y: &[DVector<f64>],
    y_prime: &[DVector<f64>],
    y_second: &[DVector<f64>],
    companion: &ContinuousSystem,
) -> Result<ContinuousPseudoOrbit> {
    let dim = companion.dim() / 2;
    check_shape(y, grid.len(), dim, "y")?;
    check_shape(y_prime, grid.len(), dim, "y'")?;
    check_shape(y_second, grid.len(), dim, "y''")?;
    let w = y_prime.iter().zip(y).map(|(dy, y)| stack(dy, y)).collect();
    let dw = y_second.iter().zip(y_prime).map(|(ddy, dy)| stack(ddy, dy)).collect();
    ContinuousPseudoOrbit::new(grid, w, Some(dw), companion)
}

/// Second component of the product-space shadow.
pub fn extract_shadow(r: &ShadowResult, dim: usize) -> Vec<DVector<f64>> {
    r.x.iter().map(|w| w.rows(dim, dim).into_owned()).collect()
}

/// Residuals of the extracted second-order shadow.
pub struct SecondOrderResidual {
    /// `x'' - A x' - B x - f(t, x', x)` with `x' = z1` and `x''` by differences.
    pub residual: Vec<DVector<f64>>,
    /// `x' - z1` with `x'` by differences of `x = z2`.
    pub consistency: Vec<DVector<f64>>,
    /// Richardson budget of the grid residual (product norm).
    pub budget: Vec<f64>,
}

pub fn second_order_residual(
    r: &ShadowResult,
    w: &ContinuousPseudoOrbit,
    companion: &ContinuousSystem,
) -> Result<SecondOrderResidual> {
    let dim = companion.dim() / 2;
    let gr = grid_residual(r, w, companion)?;
    let (residual, consistency) = gr.r.iter().map(|v| split(v, dim)).unzip();
    Ok(SecondOrderResidual { residual, consistency, budget: gr.budget })
}

/// Both halves of the extracted residual against `1e-8 (1 + |w|) + budget` at every node.
pub fn verify_second_order(
    r: &ShadowResult,
    w: &ContinuousPseudoOrbit,
    companion: &ContinuousSystem,
) -> Result<Certificate> {
    let res = second_order_residual(r, w, companion)?;
    let mut cert = Certificate::new(format!("grid nodes in [{}, {}]", w.grid[0], w.grid[w.grid.len() - 1]));
    for (name, part) in
        [("second-order residual", &res.residual), ("first-order consistency x' = z1", &res.consistency)]
    {
        let mut worst = Worst::new();
        for (k, v) in part.iter().enumerate() {
            let allowed = 1e-8 * (1.0 + r.x[k].norm()) + res.budget[k];
            worst.update(exact_ratio(v.norm(), allowed), k);
        }
        let mut c = Check::ratio(name, worst.value).with_detail("|r| / (1e-8 (1 + |x|) + budget)");
        if let Some(k) = worst.at {
            c = c.at(format!("t = {}", w.grid[k]));
        }
        cert.push(c);
    }
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::{make_rate, RateKind, RateParams};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_const(a: f64, b: f64) -> SecondOrderSystem {
        SecondOrderSystem::new(
            1,
            move |_| DMatrix::from_element(1, 1, a),
            move |_| DMatrix::from_element(1, 1, b),
            0.0,
            |_, x1, _| DVector::zeros(x1.len()),
        )
    }

    #[test]
    fn zero_coefficients_give_the_shift() {
        let comp = lift(&scalar_const(0.0, 0.0));
        let c = comp.matrix(1.3);
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(&c * &c, DMatrix::zeros(2, 2));
    }

    #[test]
    fn constant_scalar_gives_companion_matrix() {
        let comp = lift(&scalar_const(-0.1, -1.0));
        assert_eq!(comp.matrix(0.0), DMatrix::from_row_slice(2, 2, &[-0.1, -1.0, 1.0, 0.0]));
    }

    #[test]
    fn companion_acts_blockwise() {
        let a = |t: f64| DMatrix::from_row_slice(2, 2, &[t, 1.0, 0.0, -t]);
        let b = |t: f64| DMatrix::from_row_slice(2, 2, &[2.0, t * t, 1.0, 0.5]);
        let sys = SecondOrderSystem::new(2, a, b, 0.0, |_, x1, _| DVector::zeros(x1.len()));
        let comp = lift(&sys);
        let (x1, x2) = (DVector::from_vec(vec![1.0, -2.0]), DVector::from_vec(vec![0.3, 4.0]));
        let t = 0.7;
        let got = comp.matrix(t) * stack(&x1, &x2);
        let want = stack(&(a(t) * &x1 + b(t) * &x2), &x1);
        assert!((got - want).amax() < 1e-14);
    }

    #[test]
    fn lifted_nonlinearity_keeps_the_constant() {
        let rate = make_rate(RateKind::Exponential, &RateParams::default()).unwrap();
        let sys = SecondOrderSystem::weighted(
            1,
            |_| DMatrix::from_element(1, 1, -0.1),
            |_| DMatrix::from_element(1, 1, -1.0),
            Profile::SinSum { block: 1 },
            0.05,
            &rate,
            0.0,
        );
        let comp = lift(&sys);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let check = comp.g.check_lipschitz(&rate, 0.0, comp.norm(), 2, 20.0, 500, &mut rng);
        assert!(check.pass, "{check:?}");
        // sin is sharp near the origin: the ratio approaches 1.
        let mut worst = 0.0_f64;
        for _ in 0..200 {
            let t = rng.random_range(0.0..5.0);
            let w = DVector::from_vec(vec![rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)]);
            let v = DVector::from_vec(vec![w[0] + 1e-6, w[1] + 1e-6]);
            let lhs = comp.norm().vector(&(comp.g.eval(t, &w) - comp.g.eval(t, &v)));
            worst = worst.max(lhs / (0.05 * rate.weight(t, 0.0) * comp.norm().vector(&(&w - &v))));
        }
        assert_relative_eq!(worst, 1.0, max_relative = 1e-4);
    }

    #[test]
    fn product_defect_equals_second_order_defect() {
        let rate = make_rate(RateKind::Exponential, &RateParams::default()).unwrap();
        let sys = scalar_const(-0.1, -1.0);
        let comp = lift(&sys);
        let family = comp.closed_form_family(|_, _| DMatrix::identity(2, 2));
        let csys = comp
            .into_system(
                family,
                ContinuousProjectionField::constant(crate::linalg::Projections::coordinate(2, 2, 0)),
                rate,
                DichotomyConstants::new(1.0, 0.04, 0.0).unwrap(),
                10.0,
            )
            .unwrap();
        let grid: Vec<f64> = (0..=50).map(|i| i as f64 * 0.2).collect();
        let y: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, (0.3 * t).sin() + t * t)).collect();
        let dy: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, 0.3 * (0.3 * t).cos() + 2.0 * t)).collect();
        let ddy: Vec<_> = grid.iter().map(|&t| DVector::from_element(1, -0.09 * (0.3 * t).sin() + 2.0)).collect();
        let w = lift_pseudo_orbit(grid.clone(), &y, &dy, &ddy, &csys).unwrap();
        let (_, per) = crate::shadow_continuous::weighted_defect_continuous(&w.grid, &w.y, &w.y_prime, &csys).unwrap();
        for k in 0..grid.len() {
            let direct = sys.residual(grid[k], &y[k], &dy[k], &ddy[k]).norm() / csys.weight(grid[k]);
            assert_relative_eq!(per[k], direct, max_relative = 1e-12);
        }
    }
}
