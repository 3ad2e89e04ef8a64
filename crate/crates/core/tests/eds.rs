use curvedflat::algebra::builtin_pair;
use curvedflat::eds::{cartan_test, polar_rank, polar_space, Flag, IntegralElement, ProbeOptions};
use curvedflat::linalg::{c, Mat};
use nalgebra::DVector;

fn opts() -> ProbeOptions {
    ProbeOptions { samples: 10, ..ProbeOptions::default() }
}

#[test]
fn canonical_flag_characters_match_dimension_counts() {
    for n in 2usize..=5 {
        let pair = builtin_pair("sun_son", n).unwrap();
        let (dim_u, dim_u1, r) = (n * n - 1, n * (n + 1) / 2 - 1, n - 1);
        let flag = Flag::canonical(&pair).unwrap();
        let (_, rep) = curvedflat::eds::cartan_characters(&flag, &pair);
        assert_eq!(rep.characters[0], (dim_u - dim_u1) as i64);
        assert_eq!(rep.characters[1], (dim_u1 - r) as i64);
        assert!(rep.characters[2..].iter().all(|&s| s == 0));
        assert_eq!(rep.characters.iter().sum::<i64>(), (dim_u - r) as i64);
        assert!(rep.polar_monotone);
    }
}

#[test]
fn polar_space_of_zero_element_is_u1() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let h = polar_space(&IntegralElement::zero(), &pair);
    assert_eq!(h.dim(), pair.u1().dim());
    assert_eq!(polar_rank(&IntegralElement::zero(), &pair), pair.u1().dim() as i64 - 1);
}

#[test]
fn non_regular_flag_fails_the_test() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let x = Mat::from_diagonal(&DVector::from_vec(vec![c(0.0, 1.0), c(0.0, 1.0), c(0.0, -2.0)]));
    let flag = Flag::from_vectors(&pair, &[x, pair.a()[0].clone()]).unwrap();
    let rep = cartan_test(&flag, &pair, &opts()).unwrap();
    assert_eq!((rep.c_flag, rep.codimension), (8, 9));
    assert!(!rep.involutive);
}

#[test]
fn canonical_flag_passes_for_su3() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let rep = cartan_test(&Flag::canonical(&pair).unwrap(), &pair, &opts()).unwrap();
    assert_eq!(rep.codimension, rep.c_flag);
    assert!(rep.probes.iter().all(|p| p.regular));
    assert!(rep.involutive);
}

#[test]
fn vectors_outside_u1_are_rejected() {
    let pair = builtin_pair("sun_son", 3).unwrap();
    let x = pair.u0().basis()[0].clone();
    assert!(Flag::from_vectors(&pair, &[x]).is_err());
}
