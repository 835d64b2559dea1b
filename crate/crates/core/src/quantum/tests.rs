use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn close(a: &[Complex64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, &y)| (x.re - y).abs() < 1e-12 && x.im.abs() < 1e-12)
}

fn random_spec(rng: &mut impl Rng, layers: usize) -> CircuitSpec {
    let layout = CircuitLayout {
        n_layers: layers,
        ..CircuitLayout::default()
    };
    let theta = (0..layout.n_theta()).map(|_| rng.random_range(-PI..PI)).collect();
    CircuitSpec::new(layout, theta).unwrap()
}

fn random_inputs(rng: &mut impl Rng) -> Vec<f64> {
    (0..4).map(|_| rng.random_range(0.0..PI)).collect()
}

#[test]
fn ry_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = random_spec(&mut rng, 2);
    let s = spec.run(&random_inputs(&mut rng)).unwrap();
    assert_eq!(apply_ry(s.clone(), 2, 0.0).unwrap(), s);

    let one = apply_ry(StateVector::zero(1).unwrap(), 0, PI).unwrap();
    assert!(close(one.amplitudes(), &[0.0, 1.0]));
    let plus = apply_ry(StateVector::zero(1).unwrap(), 0, FRAC_PI_2).unwrap();
    assert!(close(plus.amplitudes(), &[FRAC_1_SQRT_2, FRAC_1_SQRT_2]));
}

#[test]
fn cnot_examples() {
    let s = apply_cnot(StateVector::zero(2).unwrap(), 0, 1).unwrap();
    assert!(close(s.amplitudes(), &[1.0, 0.0, 0.0, 0.0]));
    // |10> is index 2 with qubit 0 most significant.
    let s = apply_cnot(StateVector::basis(2, 2).unwrap(), 0, 1).unwrap();
    assert!(close(s.amplitudes(), &[0.0, 0.0, 0.0, 1.0]));
    let bell = apply_cnot(apply_ry(StateVector::zero(2).unwrap(), 0, FRAC_PI_2).unwrap(), 0, 1).unwrap();
    assert!(close(bell.amplitudes(), &[FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2]));
    assert!(expectation_z0(&bell).unwrap().abs() < 1e-12);
}

#[test]
fn gate_errors() {
    let s = StateVector::zero(4).unwrap();
    assert!(matches!(apply_ry(s.clone(), 4, 0.1), Err(Error::Index(_))));
    assert!(matches!(apply_cnot(s.clone(), 1, 1), Err(Error::Contract(_))));
    assert!(matches!(apply_cnot(s, 0, 9), Err(Error::Index(_))));
    let spec = random_spec(&mut ChaCha8Rng::seed_from_u64(1), 2);
    assert!(matches!(spec.run(&[0.1, 0.2, 0.3]), Err(Error::Contract(_))));
    assert!(CircuitSpec::new(CircuitLayout::default(), vec![0.0; 7]).is_err());
}

#[test]
fn zero_angles_leave_ground_state() {
    let spec = CircuitSpec::new(CircuitLayout::default(), vec![0.0; 8]).unwrap();
    let s = run_circuit(&spec, &[0.0; 4]).unwrap();
    let mut expected = vec![0.0; 16];
    expected[0] = 1.0;
    assert!(close(s.amplitudes(), &expected));
}

#[test]
fn expectation_examples() {
    assert_eq!(expectation_z0(&StateVector::zero(4).unwrap()).unwrap(), 1.0);
    assert_eq!(expectation_z0(&StateVector::basis(4, 0b1000).unwrap()).unwrap(), -1.0);
    let bad = StateVector::from_amplitudes(vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)]).unwrap();
    assert!(matches!(expectation_z0(&bad), Err(Error::Contract(_))));
}

#[test]
fn statevector_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for layers in [0, 1, 2, 3] {
        for _ in 0..10 {
            let spec = random_spec(&mut rng, layers);
            let inputs = random_inputs(&mut rng);
            let fast = spec.run(&inputs).unwrap();
            let dense = reference::amplitudes(&spec, &inputs).unwrap();
            let dev = fast
                .amplitudes()
                .iter()
                .zip(&dense)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(dev <= 1e-10, "deviation {dev}");
            let e = spec.expectation(&inputs).unwrap();
            assert!((e - reference::expectation(&spec, &inputs).unwrap()).abs() <= 1e-10);
        }
    }
}

#[test]
fn output_norm_is_one_for_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = random_spec(&mut rng, 2);
    for _ in 0..1000 {
        let s = spec.run(&random_inputs(&mut rng)).unwrap();
        assert!((s.norm_sqr() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn single_qubit_shift_rule_is_exact() {
    let layout = CircuitLayout {
        n_qubits: 1,
        n_layers: 1,
        entangler: Entangler::Ring,
        observable_qubit: 0,
    };
    for theta in [0.0, FRAC_PI_2, 0.3, -2.1, 3.0] {
        let spec = CircuitSpec::new(layout.clone(), vec![theta]).unwrap();
        let g = parameter_shift_grad(&spec, &[0.0]).unwrap();
        assert!((g.value - theta.cos()).abs() <= 1e-12);
        assert!((g.d_theta[0] + theta.sin()).abs() <= 1e-12);
        assert!((g.d_inputs[0] + theta.sin()).abs() <= 1e-12);
    }
    let at = |t: f64| parameter_shift_grad(&CircuitSpec::new(layout.clone(), vec![t]).unwrap(), &[0.0]).unwrap();
    assert!(at(0.0).d_theta[0].abs() <= 1e-12);
    assert!((at(FRAC_PI_2).d_theta[0] + 1.0).abs() <= 1e-12);
}

#[test]
fn shift_rule_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-4;
    for _ in 0..20 {
        let spec = random_spec(&mut rng, 2);
        let inputs = random_inputs(&mut rng);
        let g = parameter_shift_grad(&spec, &inputs).unwrap();
        assert_eq!(g.evaluations, 1 + 2 * (4 + 8));
        for i in 0..4 {
            let mut up = inputs.clone();
            up[i] += h;
            let mut down = inputs.clone();
            down[i] -= h;
            let fd = (spec.expectation(&up).unwrap() - spec.expectation(&down).unwrap()) / (2.0 * h);
            assert!((fd - g.d_inputs[i]).abs() <= 1e-5);
        }
        for i in 0..8 {
            let mut up = spec.clone();
            up.theta[i] += h;
            let mut down = spec.clone();
            down.theta[i] -= h;
            let fd = (up.expectation(&inputs).unwrap() - down.expectation(&inputs).unwrap()) / (2.0 * h);
            assert!((fd - g.d_theta[i]).abs() <= 1e-5);
        }
        assert!(g.d_inputs.iter().chain(&g.d_theta).all(|d| d.abs() <= 1.0 + 1e-12));
    }
}

proptest! {
    #[test]
    fn gates_preserve_norm(ops in prop::collection::vec((0usize..4, 0usize..4, -10.0f64..10.0, any::<bool>()), 1..1000)) {
        let mut s = StateVector::zero(4).unwrap();
        for (a, b, theta, ry) in ops {
            if ry || a == b {
                s.apply_ry(a, theta).unwrap();
            } else {
                s.apply_cnot(a, b).unwrap();
            }
            prop_assert!((s.norm_sqr() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn expectation_is_bounded(theta in prop::collection::vec(-PI..PI, 8), inputs in prop::collection::vec(0.0..PI, 4)) {
        let spec = CircuitSpec::new(CircuitLayout::default(), theta).unwrap();
        let e = spec.expectation(&inputs).unwrap();
        prop_assert!((-1.0..=1.0).contains(&e));
    }
}
