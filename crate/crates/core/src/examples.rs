//! Built-in systems with their dichotomy constants, addressable by name.

use std::f64::consts::LN_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::higher_order::{lift, SecondOrderSystem};
use crate::linalg::{Norm, Projections};
use crate::linear_continuous::{ContinuousDichotomy, ContinuousProjectionField, EvolutionFamily};
use crate::linear_discrete::{DichotomyConstants, DiscreteCocycle, DiscreteDichotomy, ProjectionField};
use crate::nonlinearity::{ContinuousNonlinearity, Nonlinearity, Profile};
use crate::rates::{make_rate, sample_rate, RateKind, RateParams};
use crate::shadow_continuous::ContinuousSystem;
use crate::shadow_discrete::DiscreteSystem;

pub const DEFAULT_HORIZON: usize = 64;

#[derive(Debug, Clone)]
pub enum SystemKind {
    Discrete(DiscreteSystem),
    Continuous(ContinuousSystem),
}

#[derive(Debug, Clone)]
pub struct NamedSystem {
    pub name: String,
    pub system: SystemKind,
    /// Profile of the nonlinearity; `with_c` rebuilds it for another constant.
    pub profile: Profile,
    /// Uniform solve grid `(t_max, h)` for continuous entries.
    pub grid: Option<(f64, f64)>,
    /// Second-order form for entries built by the companion lift.
    pub second_order: Option<SecondOrderSystem>,
    pub note: &'static str,
}

impl NamedSystem {
    pub fn discrete(&self) -> Option<&DiscreteSystem> {
        match &self.system {
            SystemKind::Discrete(s) => Some(s),
            SystemKind::Continuous(_) => None,
        }
    }

    pub fn continuous(&self) -> Option<&ContinuousSystem> {
        match &self.system {
            SystemKind::Continuous(s) => Some(s),
            SystemKind::Discrete(_) => None,
        }
    }

    pub fn constants(&self) -> DichotomyConstants {
        match &self.system {
            SystemKind::Discrete(s) => s.linear.constants,
            SystemKind::Continuous(s) => s.linear.constants,
        }
    }

    pub fn norm(&self) -> Norm {
        match &self.system {
            SystemKind::Discrete(s) => s.linear.norm(),
            SystemKind::Continuous(s) => s.linear.norm(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.system {
            SystemKind::Discrete(s) => s.dim(),
            SystemKind::Continuous(s) => s.dim(),
        }
    }

    pub fn lipschitz_c(&self) -> f64 {
        match &self.system {
            SystemKind::Discrete(s) => s.f.lipschitz_c,
            SystemKind::Continuous(s) => s.f.lipschitz_c,
        }
    }

    /// The suggested uniform solve grid of a continuous entry.
    pub fn solve_grid(&self) -> Option<Vec<f64>> {
        self.grid.map(|(t_max, h)| uniform_grid(t_max, h))
    }

    /// Same linear part with the nonlinearity rebuilt for the constant `c`.
    pub fn with_c(&self, c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::InvalidInput(format!("c must be >= 0, got {c}")));
        }
        let mut out = self.clone();
        let norm = self.norm();
        match &mut out.system {
            SystemKind::Discrete(s) => {
                let k = s.linear.constants;
                s.f = Nonlinearity::weighted(self.profile, c, &s.linear.rates, k.lambda, k.d, norm);
            }
            SystemKind::Continuous(s) => {
                let k = s.linear.constants;
                s.f = ContinuousNonlinearity::weighted(self.profile, c, &s.linear.rate, k.d, norm);
            }
        }
        if let Some(s2) = &self.second_order {
            let k = self.constants();
            let rate = &out.continuous().expect("second-order entries are continuous").linear.rate;
            let rebuilt = SecondOrderSystem::weighted(s2.dim, oscillator_a, oscillator_b, self.profile, c, rate, k.d);
            out.second_order = Some(rebuilt);
        }
        Ok(out)
    }
}

/// `0, h, 2h, ..` up to `t_max` (the last step absorbs rounding).
pub fn uniform_grid(t_max: f64, h: f64) -> Vec<f64> {
    let n = (t_max / h).round().max(2.0) as usize;
    (0..=n).map(|i| t_max * i as f64 / n as f64).collect()
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v))
}

/// `A(t) = diag(-(1 + 2t), 1 + 2t, 0)` with `mu = e^t`, `nu = 1`, `D = lambda = 1`, coordinate
/// projections and `f(t, x) = c sin(|x|) u`, `u = (1, 1, 1)/sqrt(3)`.
pub fn example_partial_exponential_3d(c: f64) -> Result<NamedSystem> {
    let t_max = 20.0;
    let family = EvolutionFamily::closed_form(
        3,
        |t, s| {
            let e = (t - s) * (1.0 + t + s);
            diag(&[(-e).exp(), e.exp(), 1.0])
        },
        |t| diag(&[-(1.0 + 2.0 * t), 1.0 + 2.0 * t, 0.0]),
    );
    let rate = make_rate(RateKind::Exponential, &RateParams::default())?;
    let linear = ContinuousDichotomy::new(
        family,
        ContinuousProjectionField::constant(Projections::coordinate(3, 1, 1)),
        rate.clone(),
        DichotomyConstants::new(1.0, 1.0, 0.0)?,
        t_max,
    )?;
    let f = ContinuousNonlinearity::weighted(Profile::SinNorm, c, &rate, 0.0, Norm::Euclidean);
    Ok(NamedSystem {
        name: "partial_exponential_3d".into(),
        system: SystemKind::Continuous(ContinuousSystem::new(linear, f)),
        profile: Profile::SinNorm,
        grid: Some((t_max, 0.005)),
        second_order: None,
        note: "partial exponential dichotomy with a center direction",
    })
}

/// Scalar `T(t, s) = exp(-(t - s) + sqrt(1 + t) cos t - sqrt(1 + s) cos s)`, `A = d/dt ln T(t, 0)`,
/// `mu = e^t`, `nu = e^{sqrt(1 + t)}`, `D = 1`, `lambda = 1/2`, `d = 2`, `P1 = I`,
/// `f(t, x) = c nu^{-2} sin x`.
pub fn example_tempered_scalar(c: f64) -> Result<NamedSystem> {
    let t_max = 20.0;
    let phase = |t: f64| (1.0 + t).sqrt() * t.cos();
    let family = EvolutionFamily::closed_form(
        1,
        move |t, s| DMatrix::from_element(1, 1, (-(t - s) + phase(t) - phase(s)).exp()),
        |t| {
            let r = (1.0 + t).sqrt();
            DMatrix::from_element(1, 1, -1.0 + t.cos() / (2.0 * r) - r * t.sin())
        },
    );
    let rate = make_rate(RateKind::TemperedCustom, &RateParams { nu_scale: Some(1.0), ..Default::default() })?;
    let linear = ContinuousDichotomy::new(
        family,
        ContinuousProjectionField::constant(Projections::coordinate(1, 1, 0)),
        rate.clone(),
        DichotomyConstants::new(1.0, 0.5, 2.0)?,
        t_max,
    )?;
    let f = ContinuousNonlinearity::weighted(Profile::SinComponents, c, &rate, 2.0, Norm::Euclidean);
    Ok(NamedSystem {
        name: "tempered_scalar".into(),
        system: SystemKind::Continuous(ContinuousSystem::new(linear, f)),
        profile: Profile::SinComponents,
        grid: Some((t_max, 0.01)),
        second_order: None,
        note: "tempered exponential dichotomy, stable only",
    })
}

/// `int_0^t a(u) du` for the polynomial example with `sign = 1` (the `b` entry uses `sign = -1`).
fn polynomial_phase(coef: f64, d: f64, sign: f64, t: f64) -> f64 {
    let l = t.ln_1p();
    coef * l + sign * 0.5 * d * l * (t.cos() - 1.0)
}

/// `A(t) = diag(a(t), b(t))` with `mu = nu = 1 + t`, `D = 1`, `lambda = min(-a, b)`, coordinate
/// projections and `f(t, x) = c (1 + t)^{-(d + 1)} sin(|x|) u`.
pub fn example_polynomial_2d(a: f64, b: f64, d: f64, c: f64) -> Result<NamedSystem> {
    if !(a < 0.0) || !(b >= 0.0) {
        return Err(Error::InvalidSign(format!("polynomial example needs a < 0 <= b, got a = {a}, b = {b}")));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidInput(format!("d must be > 0, got {d}")));
    }
    let constants = DichotomyConstants::new(1.0, (-a).min(b), d)?;
    let t_max = 200.0;
    let family = EvolutionFamily::closed_form(
        2,
        move |t, s| {
            let pa = polynomial_phase(a, d, 1.0, t) - polynomial_phase(a, d, 1.0, s);
            let pb = polynomial_phase(b, d, -1.0, t) - polynomial_phase(b, d, -1.0, s);
            diag(&[pa.exp(), pb.exp()])
        },
        move |t| {
            let osc = 0.5 * d / (t + 1.0) * (t.cos() - 1.0) - 0.5 * d * t.ln_1p() * t.sin();
            diag(&[a / (t + 1.0) + osc, b / (t + 1.0) - osc])
        },
    );
    let rate = make_rate(RateKind::Polynomial, &RateParams::default())?;
    let linear = ContinuousDichotomy::new(
        family,
        ContinuousProjectionField::constant(Projections::coordinate(2, 1, 1)),
        rate.clone(),
        constants,
        t_max,
    )?;
    let f = ContinuousNonlinearity::weighted(Profile::SinNorm, c, &rate, d, Norm::Euclidean);
    Ok(NamedSystem {
        name: "polynomial_2d".into(),
        system: SystemKind::Continuous(ContinuousSystem::new(linear, f)),
        profile: Profile::SinNorm,
        grid: Some((t_max, 0.02)),
        second_order: None,
        note: "nonuniform polynomial dichotomy",
    })
}

/// `A_n = diag(rho_s, rho_u)` with `mu_n = e^n`, `nu = 1`, `D = 1`,
/// `lambda = min(-ln rho_s, ln rho_u)` and `f_n = 0`.
pub fn example_discrete_diagonal(rho_s: f64, rho_u: f64, horizon: usize) -> Result<NamedSystem> {
    if !(rho_s > 0.0 && rho_s < 1.0 && rho_u > 1.0 && rho_u.is_finite()) {
        return Err(Error::InvalidInput(format!("need 0 < rho_s < 1 < rho_u, got {rho_s}, {rho_u}")));
    }
    let lambda = (-rho_s.ln()).min(rho_u.ln());
    let rates = sample_rate(&make_rate(RateKind::Exponential, &RateParams::default())?, horizon)?;
    let a = diag(&[rho_s, rho_u]);
    let linear = DiscreteDichotomy::new(
        DiscreteCocycle::from_generator(horizon, move |_| a.clone())?,
        ProjectionField::constant(Projections::coordinate(2, 1, 1), horizon),
        rates,
        DichotomyConstants::new(1.0, lambda, 0.0)?,
    )?;
    Ok(NamedSystem {
        name: "discrete_diagonal".into(),
        system: SystemKind::Discrete(DiscreteSystem::new(linear, Nonlinearity::zero())),
        profile: Profile::SinNorm,
        grid: None,
        second_order: None,
        note: "diagonal hyperbolic model",
    })
}

/// `diag(1/2, 2)`, the canonical discrete test model (`lambda = ln 2`).
pub fn example_half_double(horizon: usize) -> Result<NamedSystem> {
    let s = example_discrete_diagonal(0.5, 2.0, horizon)?;
    debug_assert!((s.constants().lambda - LN_2).abs() < 1e-15);
    Ok(s)
}

const DAMPING: f64 = 0.1;
/// Dichotomy exponent of the oscillator; the decay rate is `DAMPING / 2`.
pub const OSCILLATOR_LAMBDA: f64 = 0.04;

fn oscillator_a(_: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, -DAMPING)
}

fn oscillator_b(_: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, -1.0)
}

/// `exp(C tau)` for `C = [[-0.1, -1], [1, 0]]`.
pub fn oscillator_propagator(tau: f64) -> DMatrix<f64> {
    let half = 0.5 * DAMPING;
    let omega = (1.0 - half * half).sqrt();
    let shifted = DMatrix::from_row_slice(2, 2, &[-half, -1.0, 1.0, half]);
    let (s, co) = (omega * tau).sin_cos();
    (DMatrix::identity(2, 2) * co + shifted * (s / omega)) * (-half * tau).exp()
}

/// `D = sup_tau |exp(C tau)| e^{lambda tau}` in the product norm, sampled finely with a margin.
fn oscillator_d(t_max: f64) -> f64 {
    let norm = Norm::BlockSum { block: 1 };
    let n = (t_max / 1e-3) as usize;
    let sup = (0..=n)
        .map(|i| {
            let tau = t_max * i as f64 / n as f64;
            norm.operator(&oscillator_propagator(tau)) * (OSCILLATOR_LAMBDA * tau).exp()
        })
        .fold(0.0, f64::max);
    sup * 1.001
}

/// `x'' = -0.1 x' - x + c sin(x' + x)` lifted to `(x', x)` with the norm `|x'| + |x|`,
/// `mu = e^t`, `nu = 1`, `P1 = I`, `lambda = 0.04` and `D` fitted on the window.
pub fn example_damped_oscillator(c: f64) -> Result<NamedSystem> {
    let t_max = 40.0;
    let rate = make_rate(RateKind::Exponential, &RateParams::default())?;
    let profile = Profile::SinSum { block: 1 };
    let sys2 = SecondOrderSystem::weighted(1, oscillator_a, oscillator_b, profile, c, &rate, 0.0);
    let comp = lift(&sys2);
    let family = comp.closed_form_family(|t, s| oscillator_propagator(t - s));
    let constants = DichotomyConstants::new(oscillator_d(t_max), OSCILLATOR_LAMBDA, 0.0)?;
    let system = comp.into_system(
        family,
        ContinuousProjectionField::constant(Projections::coordinate(2, 2, 0)),
        rate,
        constants,
        t_max,
    )?;
    Ok(NamedSystem {
        name: "damped_oscillator".into(),
        system: SystemKind::Continuous(system),
        profile,
        grid: Some((t_max, 0.05)),
        second_order: Some(sys2),
        note: "second-order equation through the companion lift",
    })
}

/// Discrete system obtained by sampling a continuous entry at the integers:
/// `A_n = T(n + 1, n)`, `P_n = P(n)`, `mu_n = mu(n)`, same constants, and the profile
/// re-weighted with the discrete weight.
pub fn sample_discrete(named: &NamedSystem, horizon: usize) -> Result<NamedSystem> {
    let sys = named.continuous().ok_or_else(|| Error::InvalidInput(format!("{} is already discrete", named.name)))?;
    let lin = &sys.linear;
    let rates = sample_rate(&lin.rate, horizon)?;
    let family = lin.family.clone();
    let cocycle =
        DiscreteCocycle::from_generator(horizon, move |n| family.t(n as f64 + 1.0, n as f64))?.with_norm(lin.norm());
    let proj_field = lin.projections.clone();
    let projections = ProjectionField::from_generator(horizon, move |n| proj_field.at(n as f64));
    let k = lin.constants;
    let linear = DiscreteDichotomy::new(cocycle, projections, rates.clone(), k)?;
    let f = Nonlinearity::weighted(named.profile, sys.f.lipschitz_c, &rates, k.lambda, k.d, lin.norm());
    Ok(NamedSystem {
        name: format!("{}_sampled", named.name),
        system: SystemKind::Discrete(DiscreteSystem::new(linear, f)),
        profile: named.profile,
        grid: None,
        second_order: None,
        note: named.note,
    })
}

/// Parameters of catalog entries; missing values take the entry defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExampleParams {
    pub c: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub d: Option<f64>,
    pub rho_s: Option<f64>,
    pub rho_u: Option<f64>,
    pub horizon: Option<usize>,
    /// Sample a continuous entry at the integers.
    pub sampled: bool,
}

pub const CATALOG: [&str; 5] =
    ["partial_exponential_3d", "tempered_scalar", "polynomial_2d", "discrete_diagonal", "damped_oscillator"];

pub fn by_name(name: &str, p: &ExampleParams) -> Result<NamedSystem> {
    let c = p.c.unwrap_or(0.0);
    let named = match name {
        "partial_exponential_3d" => example_partial_exponential_3d(c)?,
        "tempered_scalar" => example_tempered_scalar(c)?,
        "polynomial_2d" => example_polynomial_2d(p.a.unwrap_or(-1.0), p.b.unwrap_or(0.5), p.d.unwrap_or(1.0), c)?,
        "discrete_diagonal" => example_discrete_diagonal(
            p.rho_s.unwrap_or(0.5),
            p.rho_u.unwrap_or(2.0),
            p.horizon.unwrap_or(DEFAULT_HORIZON),
        )?
        .with_c(c)?,
        "damped_oscillator" => example_damped_oscillator(p.c.unwrap_or(0.005))?,
        _ => return Err(Error::Config(format!("unknown example {name:?}; known: {}", CATALOG.join(", ")))),
    };
    if p.sampled {
        sample_discrete(&named, p.horizon.unwrap_or(DEFAULT_HORIZON))
    } else {
        Ok(named)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_discrete::certify_dichotomy;
    use approx::assert_relative_eq;

    #[test]
    fn partial_3d_family_and_bound() {
        let e = example_partial_exponential_3d(0.0).unwrap();
        let fam = &e.continuous().unwrap().linear.family;
        assert_eq!(fam.t(2.5, 2.5), DMatrix::identity(3, 3));
        let stable = fam.t(1.0, 0.0)[(0, 0)];
        assert_relative_eq!(stable, (-2.0f64).exp(), max_relative = 1e-15);
        assert!(stable <= (-1.0f64).exp());
    }

    #[test]
    fn tempered_values() {
        let e = example_tempered_scalar(0.0).unwrap();
        let lin = &e.continuous().unwrap().linear;
        assert_eq!(lin.family.t(3.0, 3.0)[(0, 0)], 1.0);
        assert!((1.0 + 1e4f64).sqrt() / 1e4 < 0.1);
        let actual = lin.family.t(4.0, 0.0)[(0, 0)];
        assert_relative_eq!(actual, (-4.0 + 5f64.sqrt() * 4f64.cos() - 1.0).exp(), max_relative = 1e-14);
        let bound = (-0.5 * 4.0f64).exp() * lin.rate.nu(0.0).powf(2.0);
        assert_relative_eq!(bound, 1.0, max_relative = 1e-14);
        assert!(actual <= bound);
    }

    #[test]
    fn tempered_generator_is_derivative_of_family() {
        let e = example_tempered_scalar(0.0).unwrap();
        let fam = &e.continuous().unwrap().linear.family;
        for t in [0.0, 1.3, 7.0, 19.0] {
            let h = 1e-5;
            let fd = (fam.t(t + h, 0.0)[(0, 0)] - fam.t(t - h, 0.0)[(0, 0)].max(0.0)) / (2.0 * h);
            let fd = if t == 0.0 { (fam.t(h, 0.0)[(0, 0)] - 1.0) / h } else { fd };
            assert_relative_eq!(fd / fam.t(t, 0.0)[(0, 0)], fam.a(t)[(0, 0)], max_relative = 1e-4, epsilon = 1e-4);
        }
    }

    #[test]
    fn polynomial_signs_and_weight() {
        assert!(matches!(example_polynomial_2d(1.0, 0.5, 1.0, 0.0), Err(Error::InvalidSign(_))));
        assert!(matches!(example_polynomial_2d(-1.0, -0.5, 1.0, 0.0), Err(Error::InvalidSign(_))));
        assert!(example_polynomial_2d(-1.0, 0.0, 1.0, 0.0).is_err());
        let e = example_polynomial_2d(-1.0, 0.5, 1.0, 0.0).unwrap();
        let lin = &e.continuous().unwrap().linear;
        assert_eq!(lin.constants.lambda, 0.5);
        for t in [0.0, 3.0, 150.0] {
            assert_relative_eq!(lin.rate.weight(t, 1.0), (1.0 + t).powi(-2), max_relative = 1e-14);
        }
    }

    #[test]
    fn polynomial_generator_is_derivative_of_family() {
        let e = example_polynomial_2d(-1.0, 0.5, 1.0, 0.0).unwrap();
        let fam = &e.continuous().unwrap().linear.family;
        for t in [0.5, 4.0, 100.0] {
            let h = 1e-6;
            let fd = (fam.t(t + h, t) - fam.t(t - h, t)) / (2.0 * h);
            assert!((fd - fam.a(t)).amax() < 1e-6, "t = {t}");
        }
    }

    #[test]
    fn discrete_diagonal_model() {
        let e = example_discrete_diagonal(0.5, 2.0, 16).unwrap();
        let sys = e.discrete().unwrap();
        assert_eq!(sys.linear.constants.lambda, LN_2);
        let l = &sys.linear;
        let cert = certify_dichotomy(&l.cocycle, &l.projections, &l.rates, &l.constants).unwrap();
        assert!(cert.overall);
        assert_relative_eq!(cert.worst_ratio(), 1.0, max_relative = 1e-12);
        assert!(example_discrete_diagonal(1.0, 1.0, 16).is_err());
        let mut y = vec![nalgebra::DVector::from_vec(vec![1.0, 0.0])];
        for n in 0..16 {
            let next = sys.step(n, &y[n]);
            y.push(next);
        }
        assert_eq!(y[16][0], 2f64.powi(-16));
        assert_eq!(crate::shadow_discrete::weighted_defect(&y, sys).unwrap().0, 0.0);
    }

    #[test]
    fn oscillator_propagator_is_exponential() {
        let c = DMatrix::from_row_slice(2, 2, &[-0.1, -1.0, 1.0, 0.0]);
        for tau in [0.3, 2.0, 17.5] {
            assert!((oscillator_propagator(tau) - (&c * tau).exp()).amax() < 1e-12);
        }
        let e = example_damped_oscillator(0.005).unwrap();
        let k = e.constants();
        assert!(k.big_d >= 1.0 && k.big_d < 2.0, "D = {}", k.big_d);
        assert!(e.continuous().unwrap().constants().q < 0.5);
    }

    #[test]
    fn sampled_partial_3d_steps() {
        let e = sample_discrete(&example_partial_exponential_3d(0.05).unwrap(), 8).unwrap();
        let sys = e.discrete().unwrap();
        for n in [0usize, 3, 7] {
            let a = sys.linear.cocycle.matrix(n);
            let k = 2.0 * n as f64 + 2.0;
            assert_relative_eq!(a[(0, 0)], (-k).exp(), max_relative = 1e-14);
            assert_relative_eq!(a[(1, 1)], k.exp(), max_relative = 1e-14);
            assert_eq!(a[(2, 2)], 1.0);
        }
    }

    #[test]
    fn lookup_by_name() {
        for name in CATALOG {
            let e = by_name(name, &ExampleParams::default()).unwrap();
            assert_eq!(e.name, name);
        }
        assert!(matches!(by_name("nope", &ExampleParams::default()), Err(Error::Config(_))));
    }
}
