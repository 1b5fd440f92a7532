use std::f64::consts::PI;

use fibrekahler::adiabatic::{log_slope, richardson};
use fibrekahler::fibration::wp_pointwise;
use fibrekahler::ift::{lift_constant, Certificate};
use fibrekahler::twisted::Twist;
use fibrekahler::{ddbar, Form11, KahlerStructure, PeriodicLattice, ScalarField, C64};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tau() -> impl Strategy<Value = C64> {
    (-0.5f64..0.5, 0.6f64..1.6).prop_map(|(re, im)| C64::new(re, im))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn certificate_definition_holds(norm in 1.0f64..1e6, c in 1e-3f64..10.0, res in 0.0f64..1e-3) {
        let cert = Certificate::new(32.0, 2, norm, c, res);
        prop_assert!(cert.is_consistent());
        prop_assert_eq!(cert.delta, cert.delta_prime / (2.0 * cert.inverse_norm));
        prop_assert_eq!(cert.certified, res < cert.delta);
    }

    #[test]
    fn constant_lift_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, r in 1.0f64..200.0) {
        let lhs = lift_constant(a + 2.0 * b, r);
        let rhs = lift_constant(a, r) + 2.0 * lift_constant(b, r);
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn flat_volume_is_the_lattice_cell(t in tau()) {
        let lat = PeriodicLattice::new(vec![t], vec![8, 8]).unwrap();
        let expect = (2.0 * PI).powi(2) * t.im;
        prop_assert!((KahlerStructure::flat(&lat).volume() - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn spectrum_round_trip(seed in 0u64..1000, t in tau()) {
        let lat = PeriodicLattice::new(vec![t], vec![8, 10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = ScalarField::random_smooth(&lat, 3, 1.0, &mut rng);
        let back = ScalarField::from_spectrum(&lat, f.spectrum());
        prop_assert!((&back - &f).max_abs() < 1e-13);
    }

    #[test]
    fn ddbar_of_real_fields_is_a_closed_hermitian_form(seed in 0u64..1000, t in tau()) {
        let lat = PeriodicLattice::new(vec![t, C64::new(0.0, 1.0)], vec![8; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = ddbar(&ScalarField::random_smooth(&lat, 1, 1.0, &mut rng));
        prop_assert!(h.hermitian_defect() < 1e-13);
        prop_assert!(h.closedness_defect() < 1e-12);
        let c = ScalarField::constant(&lat, C64::new(seed as f64, 0.0));
        prop_assert!(ddbar(&c).max_abs() < 1e-13);
    }

    #[test]
    fn gradient_pairing_is_conjugate_symmetric(seed in 0u64..1000, t in tau()) {
        let lat = PeriodicLattice::new(vec![t], vec![12, 12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pot = ScalarField::random_smooth(&lat, 1, 0.1, &mut rng);
        let om = KahlerStructure::new(&Form11::identity(&lat), &pot).unwrap();
        let f = ScalarField::random_smooth(&lat, 2, 1.0, &mut rng);
        let g = ScalarField::random_smooth(&lat, 2, 1.0, &mut rng);
        let a = om.grad_pair(&f, &g).unwrap();
        let b = om.grad_pair(&g, &f).unwrap();
        prop_assert!((&a - &b.conj()).max_abs() < 1e-12 * a.max_abs().max(1.0));
        prop_assert!(om.grad_pair(&f, &f).unwrap().values().iter().all(|v| v.re >= -1e-14));
    }

    #[test]
    fn total_scalar_curvature_vanishes_on_tori(seed in 0u64..1000, t in tau()) {
        let lat = PeriodicLattice::new(vec![t], vec![16, 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pot = ScalarField::random_smooth(&lat, 1, 0.2, &mut rng);
        let om = KahlerStructure::new(&Form11::identity(&lat), &pot).unwrap();
        prop_assert!(om.integrate(om.scalar_curvature()).norm() < 1e-10);
    }

    #[test]
    fn negative_twists_are_rejected(a in 0.01f64..5.0) {
        let lat = PeriodicLattice::square(1, 8).unwrap();
        prop_assert!(Twist::new(Form11::identity(&lat).scale(-a)).is_err());
        prop_assert!(Twist::new(Form11::identity(&lat).scale(a)).unwrap().degeneracy().is_none());
    }

    #[test]
    fn wp_family_is_quadratic_and_positive(t in tau(), c in 0.5f64..3.0) {
        let b0 = [C64::new(0.0, 0.0)];
        let one = wp_pointwise(&|b: &[C64]| t + b[0], &b0, 8).unwrap()[(0, 0)];
        let scaled = wp_pointwise(&|b: &[C64]| t + c * b[0], &b0, 8).unwrap()[(0, 0)];
        prop_assert!(one.re > 0.0 && one.im.abs() < 1e-8);
        prop_assert!((scaled.re / (c * c * one.re) - 1.0).abs() < 1e-6);
        prop_assert!((one.re - 0.25 / (t.im * t.im)).abs() < 1e-6 * one.re);
    }

    #[test]
    fn log_slope_recovers_power_laws(k in -4.0f64..4.0, a in 0.1f64..10.0) {
        let xs = [8.0, 16.0, 32.0, 64.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| a * x.powf(k)).collect();
        prop_assert!((log_slope(&xs, &ys) - k).abs() < 1e-10);
    }

    #[test]
    fn richardson_is_exact_on_polynomials(c in proptest::collection::vec(-2.0f64..2.0, 3)) {
        let lat = PeriodicLattice::square(1, 8).unwrap();
        let h = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
        let vals: Vec<ScalarField> = h
            .iter()
            .map(|&x| ScalarField::constant(&lat, C64::new(c[0] + c[1] * x + c[2] * x * x, 0.0)))
            .collect();
        let (lim, _) = richardson(&h, &vals).unwrap();
        prop_assert!((lim.values()[0].re - c[0]).abs() < 1e-11);
    }
}
