mod common;

use common::{max_diff, random_density, random_phi};
use num_complex::Complex64;
use proptest::prelude::*;
use qrestore::chain::{build_couplings, build_sector_hamiltonian, sector_basis, ChainSpec, CouplingModel};
use qrestore::dynamics::{eigendecompose, transfer_probability, Propagator};
use qrestore::qstate::{coherence_order, mq_decompose, receiver_map, receiver_state, Matrix4c, TwoQubitState};
use qrestore::restorer::{build_v0, scale_factors, PhiParams, RestoredEvolution, N_PHI};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> impl Strategy<Value = CouplingModel> {
    prop_oneof![Just(CouplingModel::NearestNeighbor), Just(CouplingModel::FullDipole)]
}

fn chain() -> impl Strategy<Value = ChainSpec> {
    (6usize..=12, 0.1f64..1.5, 0.1f64..1.5, model())
        .prop_map(|(n, r1, r2, m)| ChainSpec::with_boundary(n, r1, r2, m))
}

fn angles() -> impl Strategy<Value = PhiParams> {
    prop::collection::vec(-10.0f64..10.0, N_PHI).prop_map(|v| PhiParams::from_slice(&v).unwrap())
}

fn order_k_matrix(rng: &mut ChaCha8Rng, k: i32) -> Matrix4c {
    Matrix4c::from_fn(|r, c| {
        if coherence_order(r, c) == k {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coupling_matrix_is_mirror_symmetric(spec in chain()) {
        let d = build_couplings(&spec).unwrap();
        let r = d.reflected();
        prop_assert!((d.matrix() - r.matrix()).amax() < 1e-12);
        prop_assert!((d.matrix() - d.matrix().transpose()).amax() == 0.0);
    }

    #[test]
    fn sector_evolution_is_unitary(spec in chain(), t in 0.0f64..200.0) {
        let prop = Propagator::for_chain(&spec).unwrap();
        for s in prop.sectors() {
            let u = s.unitary(t);
            let defect = &u.adjoint() * &u - nalgebra::DMatrix::<Complex64>::identity(u.nrows(), u.ncols());
            prop_assert!(qrestore::max_abs(defect.iter()) < 1e-10);
        }
    }

    #[test]
    fn group_property(spec in chain(), t1 in 0.0f64..60.0, t2 in 0.0f64..60.0) {
        let prop = Propagator::for_chain(&spec).unwrap();
        for s in prop.sectors() {
            let lhs = s.unitary(t1) * s.unitary(t2);
            let rhs = s.unitary(t1 + t2);
            prop_assert!(qrestore::max_abs((lhs - rhs).iter()) < 1e-9);
        }
    }

    #[test]
    fn transfer_probability_invariant_under_reflection(spec in chain(), t in 0.0f64..80.0) {
        let reflected = build_couplings(&spec).unwrap().reflected();
        let ops = (0..=2)
            .map(|k| build_sector_hamiltonian(&reflected, &sector_basis(spec.n_nodes, k).unwrap()).unwrap())
            .collect::<Vec<_>>();
        let mirrored = eigendecompose(&ops).unwrap();
        let original = Propagator::for_chain(&spec).unwrap();
        let (a, b) = (transfer_probability(&original, t).unwrap(), transfer_probability(&mirrored, t).unwrap());
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn scan_matches_direct_probability(spec in chain(), t in 0.0f64..50.0) {
        let prop = Propagator::for_chain(&spec).unwrap();
        let spectrum = prop.transfer_spectrum().unwrap();
        prop_assert!((spectrum.probability(t) - transfer_probability(&prop, t).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn receiver_unitary_preserves_structure(phi in angles()) {
        let v = build_v0(&phi);
        prop_assert!(v.unitarity_defect() <= 1e-12);
        prop_assert!(v.iz_commutator_defect() <= 1e-12);
    }

    #[test]
    fn phi_records_round_trip(phi in angles()) {
        prop_assert_eq!(PhiParams::from_records(&phi.to_records()).unwrap(), phi);
    }

    #[test]
    fn mq_components_recompose(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix4c::from_fn(|_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let d = mq_decompose(&m);
        prop_assert!(max_diff(&d.recompose(), &m) == 0.0);
        for k in -2..=2 {
            for r in 0..4 {
                for c in 0..4 {
                    if coherence_order(r, c) != k {
                        prop_assert_eq!(d.component(k)[(r, c)], Complex64::new(0.0, 0.0));
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scale_factor_identities(seed in any::<u64>(), t in 0.0f64..40.0, n in 6usize..=11) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prop = Propagator::for_chain(&ChainSpec::with_boundary(n, 0.5, 0.8, CouplingModel::FullDipole)).unwrap();
        let v0 = build_v0(&random_phi(&mut rng));
        let f = scale_factors(&prop, &v0, t).unwrap();
        prop_assert!((f.lambda0_flip.norm_sqr() - f.lambda0_diag[0] * f.lambda0_diag[1]).abs() < 1e-14);
        prop_assert!(f.magnitudes().iter().all(|&m| m <= 1.0 + 1e-12));

        // (00;11) passes through with factor λ² regardless of the constraints
        let mut unit = Matrix4c::zeros();
        unit[(0, 3)] = Complex64::new(1.0, 0.0);
        unit[(3, 0)] = Complex64::new(1.0, 0.0);
        let out = receiver_map(&unit, &RestoredEvolution { prop: &prop, v0: &v0, t }).unwrap();
        prop_assert!((out[(0, 3)] - f.lambda2).norm() < 1e-10);
    }

    #[test]
    fn coherence_orders_do_not_mix(seed in any::<u64>(), t in 0.0f64..60.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prop = Propagator::for_chain(&ChainSpec::with_boundary(9, 0.4, 0.7, CouplingModel::FullDipole)).unwrap();
        let v0 = build_v0(&random_phi(&mut rng));
        let evolution = RestoredEvolution { prop: &prop, v0: &v0, t };
        for k in -2..=2 {
            let out = receiver_map(&order_k_matrix(&mut rng, k), &evolution).unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    if coherence_order(r, c) != k {
                        prop_assert!(out[(r, c)].norm() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn receiver_map_is_linear(seed in any::<u64>(), t in 0.0f64..60.0, alpha in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prop = Propagator::for_chain(&ChainSpec::homogeneous(8, CouplingModel::FullDipole)).unwrap();
        let v0 = build_v0(&random_phi(&mut rng));
        let evolution = RestoredEvolution { prop: &prop, v0: &v0, t };
        let (a, b) = (random_density(&mut rng), random_density(&mut rng));
        let mixed = a * Complex64::new(alpha, 0.0) + b * Complex64::new(1.0 - alpha, 0.0);
        let lhs = receiver_map(&mixed, &evolution).unwrap();
        let rhs = receiver_map(&a, &evolution).unwrap() * Complex64::new(alpha, 0.0)
            + receiver_map(&b, &evolution).unwrap() * Complex64::new(1.0 - alpha, 0.0);
        prop_assert!(max_diff(&lhs, &rhs) < 1e-13);
    }

    #[test]
    fn receiver_state_is_a_state(seed in any::<u64>(), t in 0.0f64..60.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prop = Propagator::for_chain(&ChainSpec::with_boundary(10, 0.3, 0.6, CouplingModel::FullDipole)).unwrap();
        let v0 = build_v0(&random_phi(&mut rng));
        let rho = TwoQubitState::new(random_density(&mut rng)).unwrap();
        let out = receiver_state(&rho, &RestoredEvolution { prop: &prop, v0: &v0, t }).unwrap();
        prop_assert!((out.matrix().trace() - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        prop_assert!(out.min_eigenvalue() >= -1e-10);
    }
}
