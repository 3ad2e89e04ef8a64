use curvedflat::algebra::builtin_pair;
use curvedflat::dressing::{
    birkhoff_factor, check_point, commuting_expansion_residual, default_lambda_samples, dress_grid, extract_solution,
    loop_reality_residual, make_reality_loop, LoopSpec, RationalLoop, RealityLoop, VacuumExponent,
};
use curvedflat::grid::Grid;
use curvedflat::linalg::{self, c, Mat};
use num_complex::Complex64;
use proptest::prelude::*;

fn spec(re: f64, im: f64, seed: u64) -> LoopSpec {
    LoopSpec { poles: vec![c(re, im)], seed, rank: 1, mirror: true }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reality_loops_invert_and_satisfy_both_identities(
        re in 0.3f64..1.5, im in 0.3f64..1.5, seed in 0u64..1000, lr in -2.0f64..2.0, li in -2.0f64..2.0,
    ) {
        let pair = builtin_pair("sun_son", 3).unwrap();
        let f = make_reality_loop(&spec(re, im, seed), &pair).unwrap();
        let lam = c(lr, li);
        let near_pole = f.f.poles().iter().chain(f.f_inv.poles()).any(|p| (p - lam).norm() < 0.05);
        prop_assume!(!near_pole);
        let prod = f.f.eval(lam) * f.f_inv.eval(lam);
        let scale = linalg::fnorm(&f.f.eval(lam)) * linalg::fnorm(&f.f_inv.eval(lam));
        prop_assert!(linalg::dist(&prod, &linalg::identity(3)) <= 1e-11 * scale.max(1.0));
        prop_assert!(loop_reality_residual(&f, &pair, &default_lambda_samples()) <= 1e-10);
    }

    #[test]
    fn factorization_reproduces_the_product(x1 in -0.6f64..0.6, x2 in -0.6f64..0.6, seed in 0u64..100) {
        let pair = builtin_pair("sun_son", 3).unwrap();
        let f = make_reality_loop(&spec(1.0, 1.0, seed), &pair).unwrap();
        let e = VacuumExponent::new(&pair, &[x1, x2], vec![]).unwrap();
        let point = birkhoff_factor(&f, &e).unwrap();
        let checks = check_point(&point, &f, &pair, &default_lambda_samples());
        prop_assert!(checks.product_identity <= 1e-9, "{:?}", checks);
        prop_assert!(checks.entirety <= 1e-9, "{:?}", checks);
        prop_assert!(checks.reality <= 1e-9, "{:?}", checks);
        prop_assert!(checks.m_at_infinity <= 1e-9, "{:?}", checks);
    }
}

#[test]
fn loop_product_evaluates_as_matrix_product() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let a = make_reality_loop(&spec(1.0, 1.0, 3), &pair).unwrap();
    let b = make_reality_loop(&spec(0.0, 0.7, 5), &pair).unwrap();
    let ab = a.f.mul(&b.f).unwrap();
    for lam in [c(0.3, 0.1), c(-2.0, 0.5), c(4.0, -3.0)] {
        let direct = a.f.eval(lam) * b.f.eval(lam);
        assert!(linalg::dist(&ab.eval(lam), &direct) < 1e-11);
    }
    assert!(RationalLoop::identity(3).is_identity());
}

#[test]
fn imaginary_pole_gives_one_factor() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let f = make_reality_loop(&spec(0.0, 0.9, 11), &pair).unwrap();
    assert_eq!(f.f.poles().len(), 1);
    assert!((f.f.poles()[0] - c(0.0, -0.9)).norm() < 1e-12 || (f.f.poles()[0] - c(0.0, 0.9)).norm() < 1e-12);
}

#[test]
fn identity_loop_leaves_the_vacuum() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let g = Grid::square(1.0, 9, 2).unwrap();
    let d = dress_grid(&RealityLoop::identity(3), &pair, &g, &[]).unwrap();
    assert!(d.holes.is_empty());
    let v = extract_solution(&d, &pair).unwrap();
    assert!(v.values.iter().all(|m| linalg::fnorm(m) == 0.0));
}


#[test]
fn dressing_is_deterministic() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let f = make_reality_loop(&spec(1.0, 1.0, 7), &pair).unwrap();
    let g = Grid::square(0.8, 9, 2).unwrap();
    let a = extract_solution(&dress_grid(&f, &pair, &g, &[]).unwrap(), &pair).unwrap();
    let b = extract_solution(&dress_grid(&f, &pair, &g, &[]).unwrap(), &pair).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn expansions_of_commuting_elements_commute() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let f = make_reality_loop(&spec(1.0, 1.0, 7), &pair).unwrap();
    let point = birkhoff_factor(&f, &VacuumExponent::new(&pair, &[0.2, -0.1], vec![]).unwrap()).unwrap();
    let (a1, a2): (&Mat, &Mat) = (&pair.a()[0], &pair.a()[1]);
    assert!(commuting_expansion_residual(&point, a1, a2, 6).unwrap() < 1e-9);
}

#[test]
fn rank_must_stay_below_n() {
    let pair = builtin_pair("sun_son", 2).unwrap();
    let bad = LoopSpec { poles: vec![Complex64::new(1.0, 1.0)], seed: 1, rank: 2, mirror: true };
    assert!(make_reality_loop(&bad, &pair).is_err());
}
