//! Lipschitz perturbations `f_n(x)` and `f(t, x)` with the weighted Lipschitz bounds required by
//! the shadowing construction.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certificate::{exact_ratio, Check};
use crate::linalg::Norm;
use crate::rates::{RatePair, RateSequence};

pub type DiscreteMap = Arc<dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ContinuousMap = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Unweighted shape of a built-in nonlinearity. Every profile is 1-Lipschitz in the norm it is
/// evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Zero,
    /// `sin(|x|) u` with `u` the normalized all-ones vector.
    SinNorm,
    /// `sin` applied to every component.
    SinComponents,
    /// On a product space `(x1, x2)` with blocks of size `block`: `(sin(x1 + x2), 0)`.
    SinSum {
        block: usize,
    },
}

impl Profile {
    pub fn eval(&self, x: &DVector<f64>, norm: Norm) -> DVector<f64> {
        match *self {
            Profile::Zero => DVector::zeros(x.len()),
            Profile::SinNorm => {
                let ones = DVector::from_element(x.len(), 1.0);
                let u = &ones / norm.vector(&ones);
                u * norm.vector(x).sin()
            }
            Profile::SinComponents => x.map(f64::sin),
            Profile::SinSum { block } => {
                let mut out = DVector::zeros(x.len());
                for i in 0..block.min(x.len() / 2) {
                    out[i] = (x[i] + x[block + i]).sin();
                }
                out
            }
        }
    }
}

#[derive(Clone)]
pub struct Nonlinearity {
    f: DiscreteMap,
    pub lipschitz_c: f64,
    pub profile: Option<Profile>,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Nonlinearity").field("c", &self.lipschitz_c).field("profile", &self.profile).finish()
    }
}

impl Nonlinearity {
    pub fn zero() -> Self {
        Self { f: Arc::new(|_, x| DVector::zeros(x.len())), lipschitz_c: 0.0, profile: Some(Profile::Zero) }
    }

    /// A user map with its claimed Lipschitz constant `c` (relative to the discrete weight).
    pub fn custom(c: f64, f: impl Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f), lipschitz_c: c, profile: None }
    }

    /// `f_n(x) = c w_n profile(x)` with the discrete weight `w_n`.
    pub fn weighted(profile: Profile, c: f64, rates: &RateSequence, lambda: f64, d: f64, norm: Norm) -> Self {
        let rates = rates.clone();
        let f: DiscreteMap = if c == 0.0 || profile == Profile::Zero {
            Arc::new(|_, x| DVector::zeros(x.len()))
        } else {
            Arc::new(move |n, x| profile.eval(x, norm) * (c * rates.weight(n, lambda, d)))
        };
        Self { f, lipschitz_c: if profile == Profile::Zero { 0.0 } else { c }, profile: Some(profile) }
    }

    pub fn eval(&self, n: usize, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(n, x)
    }

    /// Sampled check of `|f_n(x) - f_n(y)| <= c w_n |x - y|`.
    #[allow(clippy::too_many_arguments)]
    pub fn check_lipschitz<R: Rng>(
        &self,
        rates: &RateSequence,
        lambda: f64,
        d: f64,
        norm: Norm,
        dim: usize,
        horizon: usize,
        samples: usize,
        rng: &mut R,
    ) -> Check {
        let mut worst = 0.0_f64;
        for _ in 0..samples {
            let n = rng.random_range(0..horizon.max(1));
            let (x, y) = random_pair(dim, rng);
            let lhs = norm.vector(&(self.eval(n, &x) - self.eval(n, &y)));
            let rhs = self.lipschitz_c * rates.weight(n, lambda, d) * norm.vector(&(&x - &y));
            worst = worst.max(exact_ratio(lhs, rhs));
        }
        Check::ratio("weighted Lipschitz bound of f", worst)
    }
}

#[derive(Clone)]
pub struct ContinuousNonlinearity {
    f: ContinuousMap,
    pub lipschitz_c: f64,
    pub profile: Option<Profile>,
}

impl fmt::Debug for ContinuousNonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContinuousNonlinearity").field("c", &self.lipschitz_c).field("profile", &self.profile).finish()
    }
}

impl ContinuousNonlinearity {
    pub fn zero() -> Self {
        Self { f: Arc::new(|_, x| DVector::zeros(x.len())), lipschitz_c: 0.0, profile: Some(Profile::Zero) }
    }

    pub fn custom(c: f64, f: impl Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f), lipschitz_c: c, profile: None }
    }

    /// `f(t, x) = c mu'(t) / (mu(t) nu(t)^d) profile(x)`.
    pub fn weighted(profile: Profile, c: f64, rate: &RatePair, d: f64, norm: Norm) -> Self {
        let rate = rate.clone();
        let f: ContinuousMap = if c == 0.0 || profile == Profile::Zero {
            Arc::new(|_, x| DVector::zeros(x.len()))
        } else {
            Arc::new(move |t, x| profile.eval(x, norm) * (c * rate.weight(t, d)))
        };
        Self { f, lipschitz_c: if profile == Profile::Zero { 0.0 } else { c }, profile: Some(profile) }
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x)
    }

    /// Discrete nonlinearity obtained by sampling at the integers and re-weighting the profile
    /// with the discrete weight. Only profile-based nonlinearities can be sampled.
    pub fn sampled(&self, rates: &RateSequence, lambda: f64, d: f64, norm: Norm) -> Option<Nonlinearity> {
        self.profile.map(|p| Nonlinearity::weighted(p, self.lipschitz_c, rates, lambda, d, norm))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn check_lipschitz<R: Rng>(
        &self,
        rate: &RatePair,
        d: f64,
        norm: Norm,
        dim: usize,
        t_max: f64,
        samples: usize,
        rng: &mut R,
    ) -> Check {
        let mut worst = 0.0_f64;
        for _ in 0..samples {
            let t = rng.random_range(0.0..=t_max);
            let (x, y) = random_pair(dim, rng);
            let lhs = norm.vector(&(self.eval(t, &x) - self.eval(t, &y)));
            let rhs = self.lipschitz_c * rate.weight(t, d) * norm.vector(&(&x - &y));
            worst = worst.max(exact_ratio(lhs, rhs));
        }
        Check::ratio("weighted Lipschitz bound of f", worst)
    }
}

fn random_pair<R: Rng>(dim: usize, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
    let scale = 10f64.powf(rng.random_range(-3.0..1.0));
    let x = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0) * scale);
    let y = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0) * scale);
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::{make_rate, sample_rate, RateKind, RateParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn profiles_are_one_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (Profile::SinNorm, Norm::Euclidean, 3),
            (Profile::SinNorm, Norm::BlockSum { block: 1 }, 2),
            (Profile::SinComponents, Norm::Euclidean, 1),
            (Profile::SinSum { block: 1 }, Norm::BlockSum { block: 1 }, 2),
            (Profile::SinSum { block: 2 }, Norm::BlockSum { block: 2 }, 4),
        ];
        for (p, norm, dim) in cases {
            for _ in 0..500 {
                let (x, y) = random_pair(dim, &mut rng);
                let lhs = norm.vector(&(p.eval(&x, norm) - p.eval(&y, norm)));
                assert!(lhs <= norm.vector(&(&x - &y)) * (1.0 + 1e-12), "{p:?}");
            }
        }
    }

    #[test]
    fn weighted_nonlinearity_passes_its_check() {
        let rate = make_rate(RateKind::Exponential, &RateParams::default()).unwrap();
        let seq = sample_rate(&rate, 20).unwrap();
        let f = Nonlinearity::weighted(Profile::SinNorm, 0.1, &seq, 1.0, 0.0, Norm::Euclidean);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(f.check_lipschitz(&seq, 1.0, 0.0, Norm::Euclidean, 3, 20, 200, &mut rng).pass);
        let g = ContinuousNonlinearity::weighted(Profile::SinComponents, 0.2, &rate, 0.0, Norm::Euclidean);
        assert!(g.check_lipschitz(&rate, 0.0, Norm::Euclidean, 2, 10.0, 200, &mut rng).pass);
    }

    #[test]
    fn understated_constant_is_caught() {
        let rate = make_rate(RateKind::Exponential, &RateParams::default()).unwrap();
        let seq = sample_rate(&rate, 20).unwrap();
        let f = Nonlinearity::custom(0.01, |_, x| x * 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(!f.check_lipschitz(&seq, 1.0, 0.0, Norm::Euclidean, 2, 20, 50, &mut rng).pass);
    }
}
