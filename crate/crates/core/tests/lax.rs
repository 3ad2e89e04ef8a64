use curvedflat::algebra::builtin_pair;
use curvedflat::dressing::{dress_grid, extract_solution, make_reality_loop, LoopSpec};
use curvedflat::grid::Grid;
use curvedflat::lax::{uu0_residual, GridField, ValueSpace};
use curvedflat::linalg::{self, c, Mat};
use num_complex::Complex64;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// A constant field has no derivative terms, so the residual is the bracket term alone.
    #[test]
    fn constant_fields_leave_only_the_bracket(coef in prop::collection::vec(-1.0f64..1.0, 3)) {
        let pair = builtin_pair("sun_son", 3).unwrap();
        let basis = pair.u1_perp_a().basis();
        let v0: Mat = basis.iter().zip(&coef).fold(linalg::zeros(3), |acc, (b, x)| acc + b * Complex64::new(*x, 0.0));
        let g = Grid::square(0.5, 9, 2).unwrap();
        let v = GridField::from_fn(&g, ValueSpace::U1PerpA, |_| v0.clone());
        let res = uu0_residual(&v, &pair).unwrap();
        let a = pair.a();
        let bracket = linalg::commutator(&linalg::commutator(&a[0], &v0), &linalg::commutator(&a[1], &v0));
        for r in res.node_norms() {
            prop_assert!((r - linalg::fnorm(&bracket)).abs() <= 1e-12 * (1.0 + linalg::fnorm(&bracket)));
        }
    }
}

#[test]
fn zero_field_has_zero_residual() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let g = Grid::square(1.0, 9, 2).unwrap();
    let v = GridField::from_fn(&g, ValueSpace::U1PerpA, |_| linalg::zeros(3));
    let res = uu0_residual(&v, &pair).unwrap();
    assert!(res.node_norms().into_iter().all(|x| x == 0.0));
}

#[test]
fn dressed_solution_residual_is_fourth_order() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let f = make_reality_loop(&LoopSpec { poles: vec![c(1.0, 1.0)], seed: 7, rank: 1, mirror: true }, &pair).unwrap();
    let mut maxima = Vec::new();
    for pts in [33, 65] {
        let g = Grid::square(0.8, pts, 2).unwrap();
        let v = extract_solution(&dress_grid(&f, &pair, &g, &[]).unwrap(), &pair).unwrap();
        assert!(v.membership_residual(&pair).0 < 1e-10);
        maxima.push(uu0_residual(&v, &pair).unwrap().node_norms().into_iter().fold(0.0, f64::max));
    }
    let ratio = maxima[0] / maxima[1];
    assert!((12.8..=19.2).contains(&ratio), "ratio {ratio} from {maxima:?}");
}
