mod common;

use common::*;
use rvb::gradients;
use rvb::model::{self, GlobalParams, Priors};
use rvb::reparam;

#[test]
fn value_matches_log_joint_reparam() {
    let mut rng = rng(1);
    for family in FAMILIES {
        for method in METHODS {
            let data = random_dataset(&mut rng, family, 4, 2, 2);
            let pr = random_wishart(&mut rng, 2);
            let theta = random_theta(&mut rng, &data, &pr);
            let (ell, _) = gradients::evaluate(&data, &pr, method, &theta).unwrap();
            let direct = gradients::log_joint_at(&data, &pr, method, &theta).unwrap();
            assert!((ell - direct).abs() < 1e-10 * (1.0 + direct.abs()));
        }
    }
}

#[test]
fn full_gradient_matches_finite_differences() {
    for (k, family) in FAMILIES.into_iter().enumerate() {
        for (m, method) in METHODS.into_iter().enumerate() {
            for r in 1..=3 {
                let worst = gradient_suite(family, method, r, 10, (100 * k + 10 * m + r) as u64);
                assert!(worst < 1e-5, "{family} {method} r={r}: {worst:e}");
            }
        }
    }
}

#[test]
fn fixed_omega_gradient_matches_finite_differences() {
    let mut rng = rng(7);
    for method in METHODS {
        let data = random_dataset(&mut rng, rvb::Family::Poisson, 3, 2, 2);
        let pr = Priors::fixed_omega(100.0, vec![0.1, -0.3, 0.2]);
        let theta = random_theta(&mut rng, &data, &pr);
        let (_, analytic) = gradients::evaluate(&data, &pr, method, &theta).unwrap();
        assert_eq!(analytic.len(), 3 * 2 + 2);
        let fd = fd_gradient(&data, &pr, method, &theta, 1e-5);
        assert!(max_rel_err(&analytic, &fd) < 1e-5);
    }
}

#[test]
fn normal_omega_gradient_matches_finite_differences() {
    let mut rng = rng(8);
    for method in METHODS {
        let data = random_dataset(&mut rng, rvb::Family::Bernoulli, 4, 2, 1);
        let pr = Priors::normal_omega(100.0, 1, 10.0);
        let theta = random_theta(&mut rng, &data, &pr);
        let (_, analytic) = gradients::evaluate(&data, &pr, method, &theta).unwrap();
        let fd = fd_gradient(&data, &pr, method, &theta, 1e-5);
        assert!(max_rel_err(&analytic, &fd) < 1e-5);
    }
}

#[test]
fn a_vec_matches_finite_differences() {
    let mut rng = rng(3);
    for family in FAMILIES {
        let data = random_dataset(&mut rng, family, 1, 2, 2);
        let gp = GlobalParams::new(vec![0.2, -0.4], vec![0.1, 0.3, -0.2], 2).unwrap();
        let b = [0.3, -0.6];
        let a = gradients::a_vec(&data, 0, &gp, &b).unwrap();
        for k in 0..2 {
            let h = 1e-6;
            let mut up = b;
            let mut dn = b;
            up[k] += h;
            dn[k] -= h;
            let fd = (model::subject_log_density(&data, 0, &gp, &up).unwrap()
                - model::subject_log_density(&data, 0, &gp, &dn).unwrap())
                / (2.0 * h);
            assert!((fd - a[k]).abs() / (1.0 + a[k].abs()) < 1e-6);
        }
    }
}

#[test]
fn a_vec_vanishes_at_mode() {
    let mut rng = rng(4);
    for family in FAMILIES {
        let data = random_dataset(&mut rng, family, 1, 2, 2);
        let gp = GlobalParams::new(vec![0.2, -0.4], vec![0.1, 0.3, -0.2], 2).unwrap();
        let t = reparam::transform_a2(&data, 0, &gp).unwrap();
        let a = gradients::a_vec(&data, 0, &gp, t.lambda()).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-8));
    }
}
