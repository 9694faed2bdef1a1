//! Growth rates `mu` and nonuniformity rates `nu` parametrizing a dichotomy.
//!
//! Continuous rates are closed-form evaluators of `t >= 0`; discrete rates are sequences,
//! usually obtained by sampling a continuous rate at the integers.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::certificate::{Certificate, Check};
use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type SequenceFn = Arc<dyn Fn(usize) -> f64 + Send + Sync>;

/// Default right end of the window on which rate invariants are spot-checked.
pub const DEFAULT_T_MAX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    Exponential,
    Polynomial,
    TemperedCustom,
    UserDefined,
}

/// Parameters accepted by [`make_rate`]. Unused fields are ignored for a given kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateParams {
    /// Exponential: `mu(t) = exp(growth * t)`; default 1.
    pub growth: Option<f64>,
    /// Polynomial: `mu(t) = (1 + t)^mu_exponent`; default 1.
    pub mu_exponent: Option<f64>,
    /// Polynomial: `nu(t) = (1 + t)^nu_exponent`; default 1.
    pub nu_exponent: Option<f64>,
    /// Tempered: `nu(t) = exp(nu_scale * sqrt(1 + t))`; default 1.
    pub nu_scale: Option<f64>,
}

#[derive(Clone)]
pub struct RatePair {
    mu: ScalarFn,
    mu_prime: ScalarFn,
    nu: ScalarFn,
    pub kind: RateKind,
}

impl fmt::Debug for RatePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RatePair")
            .field("kind", &self.kind)
            .field("mu(1)", &self.mu(1.0))
            .field("nu(1)", &self.nu(1.0))
            .finish()
    }
}

impl RatePair {
    /// A rate from user-supplied closed forms. `mu_prime` must be the exact derivative of `mu`;
    /// it is checked against central differences together with the other invariants.
    pub fn user_defined(
        mu: impl Fn(f64) -> f64 + Send + Sync + 'static,
        mu_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        nu: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let rate = Self::unchecked(RateKind::UserDefined, Arc::new(mu), Arc::new(mu_prime), Arc::new(nu));
        let report = validate_rate(&rate, &default_grid(DEFAULT_T_MAX, 201));
        if !report.overall {
            let failed: Vec<_> = report.inequalities.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
            return Err(Error::InvalidRateParams(format!("user-defined rate fails {}", failed.join(", "))));
        }
        Ok(rate)
    }

    /// Builds a rate without validating it. Used for tests that inject broken rates.
    pub fn unchecked(kind: RateKind, mu: ScalarFn, mu_prime: ScalarFn, nu: ScalarFn) -> Self {
        Self { mu, mu_prime, nu, kind }
    }

    pub fn mu(&self, t: f64) -> f64 {
        (self.mu)(t)
    }

    pub fn mu_prime(&self, t: f64) -> f64 {
        (self.mu_prime)(t)
    }

    pub fn nu(&self, t: f64) -> f64 {
        (self.nu)(t)
    }

    /// Continuous pseudo-orbit/Lipschitz weight `mu'(t) / (mu(t) nu(t)^d)`.
    pub fn weight(&self, t: f64, d: f64) -> f64 {
        self.mu_prime(t) / (self.mu(t) * self.nu(t).powf(d))
    }

    /// Continuous center-norm weight `mu(t) / mu'(t)`.
    pub fn center_weight(&self, t: f64) -> f64 {
        self.mu(t) / self.mu_prime(t)
    }
}

pub fn make_rate(kind: RateKind, params: &RateParams) -> Result<RatePair> {
    let rate = match kind {
        RateKind::Exponential => {
            let a = params.growth.unwrap_or(1.0);
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidRateParams(format!("exponential growth must be > 0, got {a}")));
            }
            RatePair::unchecked(
                kind,
                Arc::new(move |t| (a * t).exp()),
                Arc::new(move |t| a * (a * t).exp()),
                Arc::new(|_| 1.0),
            )
        }
        RateKind::Polynomial => {
            let p = params.mu_exponent.unwrap_or(1.0);
            let r = params.nu_exponent.unwrap_or(1.0);
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidRateParams(format!(
                    "polynomial mu exponent must be > 0 for strict monotonicity, got {p}"
                )));
            }
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::InvalidRateParams(format!("polynomial nu exponent must be >= 0, got {r}")));
            }
            RatePair::unchecked(
                kind,
                Arc::new(move |t| (1.0 + t).powf(p)),
                Arc::new(move |t| p * (1.0 + t).powf(p - 1.0)),
                Arc::new(move |t| (1.0 + t).powf(r)),
            )
        }
        RateKind::TemperedCustom => {
            let k = params.nu_scale.unwrap_or(1.0);
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::InvalidRateParams(format!("tempered nu scale must be >= 0, got {k}")));
            }
            RatePair::unchecked(
                kind,
                Arc::new(|t: f64| t.exp()),
                Arc::new(|t: f64| t.exp()),
                Arc::new(move |t: f64| (k * (1.0 + t).sqrt()).exp()),
            )
        }
        RateKind::UserDefined => {
            return Err(Error::InvalidRateParams("user-defined rates are built with RatePair::user_defined".into()))
        }
    };
    Ok(rate)
}

/// `n` points spread evenly in `log(1 + t)` over `[0, t_max]`.
pub fn default_grid(t_max: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| (1.0 + t_max).powf(i as f64 / (n - 1) as f64) - 1.0).map(|t| t.clamp(0.0, t_max)).collect()
}

/// Checks the standing assumptions on a rate at the given times. Failures are reported,
/// not returned as errors.
pub fn validate_rate(rate: &RatePair, grid: &[f64]) -> Certificate {
    let window = match (grid.first(), grid.last()) {
        (Some(a), Some(b)) => format!("t in [{a}, {b}] ({} samples)", grid.len()),
        _ => "empty grid".to_string(),
    };
    let mut cert = Certificate::new(window);
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) || grid[0] < 0.0 {
        cert.push(Check::new("grid sorted, non-empty, t >= 0", f64::NAN, false));
        return cert;
    }

    let mut mono = 0.0_f64;
    let mut mono_at = None;
    for w in grid.windows(2) {
        if w[0] < w[1] {
            let drop = rate.mu(w[0]) - rate.mu(w[1]);
            if !(drop < 0.0) && (mono_at.is_none() || drop >= mono) {
                mono = drop.max(0.0);
                mono_at = Some(w[1]);
            }
        }
    }
    let mut c = Check::new("mu strictly increasing", mono, mono_at.is_none())
        .with_detail("largest mu(t1) - mu(t2) with t1 < t2");
    if let Some(t) = mono_at {
        c = c.at(format!("t = {t}"));
    }
    cert.push(c);

    if grid[0] == 0.0 {
        let dev = (rate.mu(0.0) - 1.0).abs();
        cert.push(Check::new("mu(0) = 1", dev, dev <= 1e-12).with_detail("|mu(0) - 1|"));
    }

    let nu_worst = grid.iter().map(|&t| 1.0 - rate.nu(t)).fold(f64::NEG_INFINITY, f64::max);
    cert.push(
        Check::new("nu >= 1", nu_worst.max(0.0), nu_worst <= 0.0 && nu_worst.is_finite())
            .with_detail("largest 1 - nu(t)"),
    );

    let mp_worst = grid.iter().map(|&t| -rate.mu_prime(t)).fold(f64::NEG_INFINITY, f64::max);
    cert.push(Check::new("mu' > 0", mp_worst.max(0.0), mp_worst < 0.0).with_detail("largest -mu'(t)"));

    // Interior points only: the central difference needs t - h >= 0.
    let mut fd_worst = 0.0_f64;
    for &t in grid {
        let h = fd_step(t);
        if t - h < 0.0 {
            continue;
        }
        let fd = (rate.mu(t + h) - rate.mu(t - h)) / (2.0 * h);
        let mp = rate.mu_prime(t);
        let rel = ((mp - fd) / mp).abs();
        fd_worst = if rel.is_nan() { f64::NAN } else { fd_worst.max(rel) };
    }
    cert.push(
        Check::new("mu' matches central difference", fd_worst, fd_worst <= 1e-6)
            .with_detail("relative |mu' - FD| / mu'"),
    );
    cert
}

/// Central-difference step `1e-5 max(1, t)`, capped at `1e-3` so that the truncation error of
/// the difference quotient stays below the tolerance for exponential rates at large `t`.
pub fn fd_step(t: f64) -> f64 {
    (1e-5 * t.max(1.0)).min(1e-3)
}

/// Spot check that `mu` eventually exceeds `threshold` on `[0, t_max]`.
pub fn reaches(rate: &RatePair, threshold: f64, t_max: f64) -> bool {
    rate.mu(t_max) > threshold
}

#[derive(Clone)]
enum SequenceSource {
    Formula { mu: SequenceFn, nu: SequenceFn },
    Table { mu: Vec<f64>, nu: Vec<f64> },
}

/// Discrete rates `mu_n`, `nu_n`.
#[derive(Clone)]
pub struct RateSequence {
    source: SequenceSource,
    /// Horizon `N` the sequence was built for. Formula-backed sequences evaluate beyond it.
    pub horizon: usize,
}

impl fmt::Debug for RateSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RateSequence").field("horizon", &self.horizon).field("mu0", &self.mu(0)).finish()
    }
}

impl RateSequence {
    pub fn from_formula(
        mu: impl Fn(usize) -> f64 + Send + Sync + 'static,
        nu: impl Fn(usize) -> f64 + Send + Sync + 'static,
        horizon: usize,
    ) -> Result<Self> {
        let seq = Self { source: SequenceSource::Formula { mu: Arc::new(mu), nu: Arc::new(nu) }, horizon };
        seq.validate()?;
        Ok(seq)
    }

    /// Explicit tables. They must cover `0..=horizon + 1` because the center weight at `N`
    /// reads `mu_{N+1}`.
    pub fn from_table(mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        if mu.len() != nu.len() || mu.len() < 3 {
            return Err(Error::InvalidRateParams("rate tables need equal lengths >= 3".into()));
        }
        let horizon = mu.len() - 2;
        let seq = Self { source: SequenceSource::Table { mu, nu }, horizon };
        seq.validate()?;
        Ok(seq)
    }

    pub fn is_formula(&self) -> bool {
        matches!(self.source, SequenceSource::Formula { .. })
    }

    pub fn mu(&self, n: usize) -> f64 {
        match &self.source {
            SequenceSource::Formula { mu, .. } => mu(n),
            SequenceSource::Table { mu, .. } => mu.get(n).copied().unwrap_or(f64::NAN),
        }
    }

    pub fn nu(&self, n: usize) -> f64 {
        match &self.source {
            SequenceSource::Formula { nu, .. } => nu(n),
            SequenceSource::Table { nu, .. } => nu.get(n).copied().unwrap_or(f64::NAN),
        }
    }

    /// Discrete weight `(mu_{n+1}^l - mu_n^l) / (mu_{n+1}^l nu_n^d)`.
    pub fn weight(&self, n: usize, lambda: f64, d: f64) -> f64 {
        let a = self.mu(n + 1).powf(lambda);
        let b = self.mu(n).powf(lambda);
        (a - b) / (a * self.nu(n).powf(d))
    }

    /// Discrete center-norm weight `mu_{n+1}^l / (mu_{n+1}^l - mu_n^l)`.
    pub fn center_weight(&self, n: usize, lambda: f64) -> f64 {
        let a = self.mu(n + 1).powf(lambda);
        let b = self.mu(n).powf(lambda);
        a / (a - b)
    }

    /// Same sequence with a longer horizon; only formula-backed sequences can be extended.
    pub fn extended(&self, horizon: usize) -> Result<Self> {
        match &self.source {
            SequenceSource::Formula { .. } => Ok(Self { source: self.source.clone(), horizon }),
            SequenceSource::Table { .. } if horizon <= self.horizon => {
                Ok(Self { source: self.source.clone(), horizon })
            }
            SequenceSource::Table { .. } => {
                Err(Error::InvalidInput("tabulated rate sequences cannot be extended".into()))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let n_max = self.horizon + 1;
        if !(self.mu(0) >= 1.0) {
            return Err(Error::InvalidRateParams(format!("mu_0 = {} < 1", self.mu(0))));
        }
        for n in 0..=n_max {
            if !(self.nu(n) >= 1.0) {
                return Err(Error::InvalidRateParams(format!("nu_{n} = {} < 1", self.nu(n))));
            }
            if n < n_max && !(self.mu(n + 1) > self.mu(n)) {
                return Err(Error::InvalidRateParams(format!(
                    "mu not strictly increasing at n = {n}: {} >= {}",
                    self.mu(n),
                    self.mu(n + 1)
                )));
            }
        }
        Ok(())
    }

    /// Checks that every center-weight denominator `mu_{n+1}^l - mu_n^l` is positive.
    pub fn check_denominators(&self, lambda: f64) -> Result<()> {
        for n in 0..=self.horizon {
            let den = self.mu(n + 1).powf(lambda) - self.mu(n).powf(lambda);
            if !(den > 0.0) {
                return Err(Error::InvalidRateParams(format!(
                    "degenerate weight mu_{{n+1}}^l - mu_n^l = {den} at n = {n}, lambda = {lambda}"
                )));
            }
        }
        Ok(())
    }
}

/// Samples a continuous rate at the integers, `mu_n = mu(n)`.
pub fn sample_rate(rate: &RatePair, n_max: usize) -> Result<RateSequence> {
    if n_max < 1 {
        return Err(Error::InvalidInput("sample_rate needs n_max >= 1".into()));
    }
    let (mu, nu) = (rate.mu.clone(), rate.nu.clone());
    RateSequence::from_formula(move |n| mu(n as f64), move |n| nu(n as f64), n_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn builtins() -> Vec<RatePair> {
        vec![
            make_rate(RateKind::Exponential, &RateParams::default()).unwrap(),
            make_rate(RateKind::Polynomial, &RateParams::default()).unwrap(),
            make_rate(RateKind::TemperedCustom, &RateParams::default()).unwrap(),
        ]
    }

    #[test]
    fn exponential_rate_values() {
        let r = make_rate(RateKind::Exponential, &RateParams::default()).unwrap();
        assert_eq!(r.mu(0.0), 1.0);
        assert_eq!(r.mu(2.0), 2.0_f64.exp());
        assert_eq!(r.mu_prime(2.0), 2.0_f64.exp());
        assert_eq!(r.nu(7.0), 1.0);
    }

    #[test]
    fn polynomial_rate_values() {
        let r = make_rate(RateKind::Polynomial, &RateParams::default()).unwrap();
        assert_eq!(r.mu(3.0), 4.0);
        assert_eq!(r.nu(3.0), 4.0);
        assert_eq!(r.mu_prime(3.0), 1.0);
    }

    #[test]
    fn tempered_rate_values() {
        let r = make_rate(RateKind::TemperedCustom, &RateParams::default()).unwrap();
        assert_eq!(r.mu(1.5), 1.5_f64.exp());
        assert_eq!(r.nu(3.0), 2.0_f64.exp());
    }

    #[test]
    fn degenerate_polynomial_rejected() {
        let p = RateParams { mu_exponent: Some(0.0), ..Default::default() };
        assert!(matches!(make_rate(RateKind::Polynomial, &p), Err(Error::InvalidRateParams(_))));
    }

    #[test]
    fn sample_exponential_and_polynomial() {
        let e = sample_rate(&builtins()[0], 2).unwrap();
        assert_eq!((e.mu(0), e.mu(1), e.mu(2)), (1.0, 1.0_f64.exp(), 2.0_f64.exp()));
        let p = sample_rate(&builtins()[1], 3).unwrap();
        assert_eq!((0..4).map(|n| p.mu(n)).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(sample_rate(&builtins()[0], 0).is_err());
    }

    #[test]
    fn validation_passes_for_exponential() {
        let grid: Vec<f64> = (0..=10).map(f64::from).collect();
        let rep = validate_rate(&builtins()[0], &grid);
        assert!(rep.overall, "{rep:?}");
    }

    #[test]
    fn validation_flags_decreasing_mu() {
        let r =
            RatePair::unchecked(RateKind::UserDefined, Arc::new(|t| 1.0 - t), Arc::new(|_| -1.0), Arc::new(|_| 1.0));
        let grid: Vec<f64> = (0..=10).map(f64::from).collect();
        let rep = validate_rate(&r, &grid);
        assert!(!rep.check("mu strictly increasing").unwrap().pass);
        assert!(!rep.overall);
    }

    #[test]
    fn validation_flags_small_nu() {
        let r = RatePair::unchecked(
            RateKind::UserDefined,
            Arc::new(|t: f64| t.exp()),
            Arc::new(|t: f64| t.exp()),
            Arc::new(|_| 0.5),
        );
        let rep = validate_rate(&r, &[0.0, 1.0, 2.0]);
        let c = rep.check("nu >= 1").unwrap();
        assert!(!c.pass);
        assert_eq!(c.worst, 0.5);
    }

    #[test]
    fn user_defined_requires_correct_derivative() {
        assert!(RatePair::user_defined(|t| 1.0 + t * t + t, |t| 2.0 * t + 1.0, |_| 1.0).is_ok());
        assert!(RatePair::user_defined(|t| 1.0 + t * t + t, |_| 1.0, |_| 1.0).is_err());
    }

    #[test]
    fn tables_must_increase() {
        assert!(RateSequence::from_table(vec![1.0, 2.0, 2.0], vec![1.0; 3]).is_err());
        let s = RateSequence::from_table(vec![1.0, 2.0, 4.0], vec![1.0; 3]).unwrap();
        assert_eq!(s.horizon, 1);
        assert!(s.check_denominators(0.5).is_ok());
    }

    proptest! {
        #[test]
        fn builtin_invariants_hold(mut ts in proptest::collection::vec(0.0..DEFAULT_T_MAX, 2..40)) {
            ts.sort_by(f64::total_cmp);
            for r in builtins() {
                for w in ts.windows(2) {
                    prop_assert!(r.mu(w[0]) <= r.mu(w[1]));
                }
                for &t in &ts {
                    prop_assert!(r.nu(t) >= 1.0);
                    prop_assert!(r.mu_prime(t) > 0.0);
                }
            }
        }

        #[test]
        fn finite_difference_matches(t in 0.0..200.0f64) {
            for r in builtins() {
                let h = 1e-5 * t.max(1.0);
                prop_assume!(t - h >= 0.0);
                let fd = (r.mu(t + h) - r.mu(t - h)) / (2.0 * h);
                prop_assert!(((r.mu_prime(t) - fd) / r.mu_prime(t)).abs() <= 1e-6);
            }
        }

        #[test]
        fn finite_difference_matches_polynomial(t in 0.0..DEFAULT_T_MAX) {
            let r = make_rate(RateKind::Polynomial, &RateParams { mu_exponent: Some(2.5), ..Default::default() }).unwrap();
            let h = 1e-5 * t.max(1.0);
            prop_assume!(t - h >= 0.0);
            let fd = (r.mu(t + h) - r.mu(t - h)) / (2.0 * h);
            prop_assert!(((r.mu_prime(t) - fd) / r.mu_prime(t)).abs() <= 1e-6);
        }

        #[test]
        fn sampling_is_exact(n in 1usize..60) {
            for r in builtins() {
                let s = sample_rate(&r, 64).unwrap();
                prop_assert_eq!(s.mu(n), r.mu(n as f64));
                prop_assert_eq!(s.nu(n), r.nu(n as f64));
            }
        }
    }
}
