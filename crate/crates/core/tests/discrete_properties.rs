//! Property tests of the discrete operator on random instances.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shadow_forge::linalg::Projections;
use shadow_forge::linear_discrete::{DiscreteCocycle, DiscreteDichotomy, ProjectionField};
use shadow_forge::nonlinearity::Nonlinearity;
use shadow_forge::oracle::{random_instance, RandomSpec};
use shadow_forge::shadow_discrete::{
    contraction_ratio, solve_shadow, DiscreteOperator, DiscreteSystem, PseudoOrbit, SolveOptions,
};

fn spec() -> impl Strategy<Value = (u64, RandomSpec)> {
    (any::<u64>(), 2usize..=4, 0usize..=2, 0.05f64..0.6, prop_oneof![Just(12usize), Just(20), Just(28)]).prop_map(
        |(seed, dim, center, q, horizon)| {
            let center = center.min(dim - 2);
            (seed, RandomSpec { dim, horizon, center, q, noise: 1e-3 })
        },
    )
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, dim: usize, scale: f64) -> Vec<DVector<f64>> {
    (0..len).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-scale..scale))).collect()
}

fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

/// The same system in the coordinates `x' = Q x`.
fn conjugate(sys: &DiscreteSystem, q: &DMatrix<f64>) -> DiscreteSystem {
    let qt = q.transpose();
    let big_n = sys.horizon();
    let mats = (0..big_n).map(|n| q * sys.linear.cocycle.matrix(n) * &qt).collect();
    let nodes = (0..=big_n)
        .map(|n| {
            let p = sys.projections(n);
            Projections::new(q * &p.p1 * &qt, q * &p.p2 * &qt, q * &p.p3 * &qt)
        })
        .collect();
    let linear = DiscreteDichotomy::new(
        DiscreteCocycle::from_matrices(mats).unwrap(),
        ProjectionField::from_nodes(nodes).unwrap(),
        sys.linear.rates.clone(),
        sys.linear.constants,
    )
    .unwrap();
    let f = sys.f.clone();
    let (q2, qt2) = (q.clone(), qt.clone());
    DiscreteSystem::new(linear, Nonlinearity::custom(f.lipschitz_c, move |n, x| &q2 * f.eval(n, &(&qt2 * x))))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_contracts_with_rate_q((seed, spec) in spec(), scale in 1e-4f64..1.0) {
        let (sys, y) = random_instance(seed, spec).unwrap();
        let q = sys.constants().q;
        let op = DiscreteOperator::new(&sys, &y.y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let len = sys.horizon() + 1;
        for _ in 0..4 {
            let z1 = random_sequence(&mut rng, len, sys.dim(), scale);
            let z2 = random_sequence(&mut rng, len, sys.dim(), scale);
            let ratio = contraction_ratio(&op, &z1, &z2);
            prop_assert!(ratio <= q * (1.0 + 1e-6), "ratio {} > q {}", ratio, q);
        }
    }

    #[test]
    fn image_of_zero_is_bounded((seed, spec) in spec()) {
        let (sys, y) = random_instance(seed, spec).unwrap();
        let r = solve_shadow(&y, &sys, &SolveOptions { tail_tolerance: Some(f64::INFINITY), ..Default::default() }).unwrap();
        prop_assert!(r.t0_norm <= r.d_bar * y.delta * (1.0 + 1e-10), "{} > {}", r.t0_norm, r.d_bar * y.delta);
    }

    #[test]
    fn iterations_follow_the_contraction_estimate((seed, spec) in spec()) {
        let (sys, y) = random_instance(seed, spec).unwrap();
        let opts = SolveOptions { tail_tolerance: Some(f64::INFINITY), ..Default::default() };
        let r = solve_shadow(&y, &sys, &opts).unwrap();
        let k = sys.constants();
        let predicted = ((opts.tol / (k.c * y.delta)).ln() / k.q.ln()).ceil().max(0.0) as usize + 2;
        prop_assert!(r.iterations <= predicted, "{} iterations, predicted {}", r.iterations, predicted);
    }

    #[test]
    fn orthogonal_change_of_coordinates_commutes((seed, spec) in spec()) {
        let (sys, y) = random_instance(seed, spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let q = random_orthogonal(&mut rng, sys.dim());
        let conj = conjugate(&sys, &q);
        let y2: Vec<_> = y.y.iter().map(|v| &q * v).collect();
        let z = random_sequence(&mut rng, sys.horizon() + 1, sys.dim(), 1e-3);
        let z2: Vec<_> = z.iter().map(|v| &q * v).collect();

        let tz = DiscreteOperator::new(&sys, &y.y).unwrap().apply(&z);
        let tz2 = DiscreteOperator::new(&conj, &y2).unwrap().apply(&z2);
        let scale = tz.iter().map(|v| v.amax()).fold(1e-3, f64::max);
        for (a, b) in tz.iter().zip(&tz2) {
            prop_assert!((&q * a - b).amax() <= 1e-9 * scale, "{:e}", (&q * a - b).amax());
        }
        let p2 = PseudoOrbit::new(y2, &conj).unwrap();
        prop_assert!((p2.delta - y.delta).abs() <= 1e-12 * y.delta.max(1e-300));
    }
}
