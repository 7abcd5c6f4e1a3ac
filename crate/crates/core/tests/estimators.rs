use rand_distr::{Distribution, Gamma};

use sqrtlab_core::coeffs::{CirField, ConstantField};
use sqrtlab_core::estimators::{
    est_hit_prob, est_invariant, est_small_cube, est_uniform_hit, feynman_kac_eval, start_grid, tail_check,
    InvariantSetup, SmallCubeSetup, SmallCubeVariant,
};
use sqrtlab_core::geometry::HyperCube;
use sqrtlab_core::grid::GridSet;
use sqrtlab_core::rng::PhiloxStream;
use sqrtlab_core::sde::{Scheme, SimConfig};

fn euler(h: f64, seed: u64, n: usize) -> SimConfig {
    SimConfig::new(h, 1.0, Scheme::FullTruncationEuler, seed, n)
}

#[test]
fn hit_prob_is_rescaling_invariant() {
    // Y_t = rX_{t/r} solves the same constant-coefficient equation, and the
    // Euler chain with step rh is the image of the chain with step h
    let field = ConstantField::scalar(1.0, 0.7, 2.0).unwrap();
    let q = HyperCube::from_parts(0.0, 0.8, vec![0.0], 1.0).unwrap();
    let gamma = GridSet::far_fraction(q.clone(), 3, 9, 0.3).unwrap();
    let r = 4.0;
    let qr = q.rescale(r, 0.0).unwrap();
    let gr = GridSet::from_mask(qr.clone(), 3, 9, gamma.mask().to_vec()).unwrap();
    let a = est_hit_prob(&euler(1e-3, 7, 4000), &field, &q, &gamma, (0.0, &[0.02])).unwrap();
    let b = est_hit_prob(&euler(r * 1e-3, 7, 4000), &field, &qr, &gr, (0.0, &[0.02 * r])).unwrap();
    let se = (a.estimate * (1.0 - a.estimate) / 4000.0).sqrt();
    assert!((a.estimate - b.estimate).abs() <= 4.0 * std::f64::consts::SQRT_2 * se, "{a:?} {b:?}");
}

#[test]
fn empty_target_drives_uniform_minimum_to_zero() {
    let field = ConstantField::scalar(1.0, 0.7, 2.0).unwrap();
    let q = HyperCube::from_parts(0.0, 35.0 / 36.0, vec![0.0], 1.0).unwrap();
    let starts = start_grid(&q, &[0.0, 0.5, 0.9]).unwrap();
    let empty = GridSet::empty(q.clone(), 9, 27).unwrap();
    let r = est_uniform_hit(&euler(1e-3, 3, 500), &field, &q, &empty, &starts).unwrap();
    assert_eq!((r.min_ci_low, r.min_estimate), (0.0, 0.0));
    let outside = vec![vec![0.0], vec![0.5]];
    assert!(est_uniform_hit(&euler(1e-3, 3, 10), &field, &q, &empty, &outside).is_err());
}

#[test]
fn wilson_width_halves_when_paths_quadruple() {
    let field = ConstantField::scalar(1.0, 0.55, 2.0).unwrap();
    let q = HyperCube::from_parts(0.0, 1.0, vec![0.0], 1.0).unwrap();
    let gamma = GridSet::time_slab(q.clone(), 2, 1, 0.5, 1.0).unwrap();
    let w = |n| {
        let r = est_hit_prob(&euler(2e-3, 9, n), &field, &q, &gamma, (0.0, &[0.0])).unwrap();
        assert!(r.ci_low <= r.estimate && r.estimate <= r.ci_high);
        r.ci_high - r.ci_low
    };
    let ratio = w(2000) / w(8000);
    assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
}

#[test]
fn constant_boundary_data_is_reproduced_exactly() {
    let one = |_: f64, _: &[f64]| 1.0;
    let zero = |_: f64, _: &[f64]| 0.0;
    let field = ConstantField::scalar(1.3, 0.9, 2.0).unwrap();
    for (theta, c, rho, x, t) in [(1.0, 0.0, 1.0, 0.0, 0.0), (0.5, 2.0, 1.0, 4.0, 0.1), (0.2, 0.0, 3.0, 2.0, 1.0)] {
        let q = HyperCube::from_parts(0.0, theta, vec![c], rho).unwrap();
        let r = feynman_kac_eval(&euler(1e-2, 1, 300), &field, &q, &one, &zero, (t, &[x])).unwrap();
        assert_eq!(r.estimate, 1.0);
    }
}

#[test]
fn boundary_start_leaves_the_face() {
    let field = ConstantField::scalar(1.0, 0.55, 2.0).unwrap();
    let setup = SmallCubeSetup {
        x0: vec![0.0],
        x: vec![0.0],
        l: 0.5,
        c: 1.0,
        beta: 2.0,
        eps: 0.5,
        alpha: 2.0,
        r: 0.75,
        t: 0.125,
        y: vec![0.0],
    };
    let r = est_small_cube(&euler(1e-3, 11, 100_000), &field, &setup).unwrap();
    assert_eq!(r.variant, SmallCubeVariant::Boundary);
    assert!(r.report.ci_low > 0.0, "{r:?}");
}

#[test]
fn stationary_tail_matches_gamma_law() {
    // stationary law Gamma(shape 2, rate 2): P[X > 6] = 13e^{-12}
    let field = CirField::scalar(1.0, 1.0, 1.0, 2.0).unwrap();
    let n = 4_000_000;
    let cfg = SimConfig::new(100.0, 100.0, Scheme::ExactCir, 13, n);
    let r = tail_check(&cfg, &field, &[1.0], 6.0, &[100.0], 1.0).unwrap();
    let oracle = 13.0 * (-12f64).exp();
    let se = (oracle / n as f64).sqrt();
    assert!((r.rows[0].p_hat - oracle).abs() < 3.0 * se, "{} vs {oracle}", r.rows[0].p_hat);
}

#[test]
fn invariant_law_is_close_to_reference_gamma() {
    let field = CirField::scalar(1.0, 1.0, 1.0, 2.0).unwrap();
    let law = Gamma::new(2.0, 0.5).unwrap();
    let mut rng = PhiloxStream::new(99, 0, 0);
    let reference: Vec<Vec<f64>> = (0..20_000).map(|_| vec![law.sample(&mut rng)]).collect();
    let setup = InvariantSetup {
        burn_in: 20.0,
        horizon: 2000.0,
        thinning: 0.5,
        starts: vec![vec![3.0]],
        paths_per_start: 2,
        batches: 20,
    };
    let cfg = SimConfig::new(0.5, 1.0, Scheme::ExactCir, 21, 1);
    let r = est_invariant(&cfg, &field, &setup, Some(&reference)).unwrap();
    let d = r.reference_w1.unwrap()[0];
    assert!(d < 0.05, "{d}");
    let q = &r.per_start[0].axes[0].quantiles;
    assert!(q.windows(2).all(|w| w[0] <= w[1]));
}
