mod common;

use common::{random_density, random_phi};
use nalgebra::{DMatrix, DVector};
use qrestore::chain::{ChainSpec, CouplingModel};
use qrestore::dynamics::Propagator;
use qrestore::optimizer::{optimize_phi, OptimizationTask, Target};
use qrestore::qstate::TwoQubitState;
use qrestore::restorer::{build_v0, verify_restoring, PhiParams, RestoringSystem};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn line() -> (Propagator, f64) {
    let prop = Propagator::for_chain(&ChainSpec::with_boundary(12, 0.4, 0.65, CouplingModel::FullDipole)).unwrap();
    (prop, 11.5)
}

/// Gauss-Newton on the selected real residual rows only.
fn solve_rows(sys: &RestoringSystem, start: &PhiParams, rows: std::ops::Range<usize>) -> PhiParams {
    let mut phi = *start;
    for _ in 0..60 {
        let (r, jac) = sys.residual_jacobian(&phi);
        let r = DVector::from_iterator(rows.len(), rows.clone().map(|i| r[i]));
        if r.amax() < 1e-14 {
            break;
        }
        let j: DMatrix<f64> = jac.rows(rows.start, rows.len()).into_owned();
        let y = (&j * j.transpose()).cholesky().unwrap().solve(&r);
        let step = j.transpose() * y;
        let next: Vec<f64> = phi.as_slice().iter().zip(step.iter()).map(|(x, d)| x - d).collect();
        phi = PhiParams::from_slice(&next).unwrap();
    }
    phi
}

#[test]
fn feasible_angles_restore_every_off_diagonal_element() {
    let (prop, t) = line();
    for target in [Target::L2, Target::SumAll, Target::L0_flip] {
        let result = optimize_phi(&OptimizationTask::new(target, 3, 11), &prop, t).unwrap();
        assert!(result.feasible);
        let fresh = RestoringSystem::new(&prop, t).unwrap();
        assert!(fresh.evaluate(&build_v0(&result.phi)).0.max_abs() <= 1e-10);

        let v0 = build_v0(&result.phi);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let rho = TwoQubitState::new(random_density(&mut rng)).unwrap();
            let report = verify_restoring(&rho, &prop, &v0, t).unwrap();
            assert!(report.max_off_diagonal_error <= 1e-8, "{target}: {}", report.max_off_diagonal_error);
            assert!(report.max_diagonal_error <= 1e-8, "{target}: {}", report.max_diagonal_error);
            assert!(report.normalization.trace_identity_gap <= 1e-8);
        }
    }
}

#[test]
fn discrepancies_scale_with_residual() {
    let (prop, t) = line();
    let result = optimize_phi(&OptimizationTask::new(Target::SumAll, 2, 5), &prop, t).unwrap();
    let sys = RestoringSystem::new(&prop, t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for scale in [1e-6, 1e-4, 1e-2] {
        let noise = random_phi(&mut rng);
        let perturbed: Vec<f64> =
            result.phi.as_slice().iter().zip(noise.as_slice()).map(|(x, n)| x + scale * (n - 3.0)).collect();
        let phi = PhiParams::from_slice(&perturbed).unwrap();
        let v0 = build_v0(&phi);
        let eps = sys.evaluate(&v0).0.max_abs();
        for _ in 0..20 {
            let rho = TwoQubitState::new(random_density(&mut rng)).unwrap();
            let report = verify_restoring(&rho, &prop, &v0, t).unwrap();
            assert!(report.max_off_diagonal_error <= 10.0 * eps, "eps {eps}: {}", report.max_off_diagonal_error);
        }
    }
}

#[test]
fn zero_order_constraints_alone_restore_only_the_flip_element() {
    let (prop, t) = line();
    let sys = RestoringSystem::new(&prop, t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // rows 8..14 hold the flip residuals and the zero-order cross sum
    let phi = solve_rows(&sys, &random_phi(&mut rng), 8..14);
    let (residuals, _) = sys.evaluate(&build_v0(&phi));
    assert!(residuals.flip.iter().all(|z| z.norm() < 1e-12));
    assert!(residuals.zero_order.norm() < 1e-12);
    assert!(residuals.first_order.iter().any(|z| z.norm() > 1e-4));

    let v0 = build_v0(&phi);
    let mut worst_first_order = 0.0f64;
    for _ in 0..10 {
        let rho = TwoQubitState::new(random_density(&mut rng)).unwrap();
        let report = verify_restoring(&rho, &prop, &v0, t).unwrap();
        for e in &report.off_diagonal {
            match (e.row, e.col) {
                (1, 2) | (2, 1) | (0, 3) | (3, 0) => assert!(e.abs_error < 1e-12, "({},{})", e.row, e.col),
                _ => worst_first_order = worst_first_order.max(e.abs_error),
            }
        }
    }
    assert!(worst_first_order > 1e-4);
}

#[test]
fn without_receiver_unitary_first_order_is_not_restored() {
    let (prop, t) = line();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rho = TwoQubitState::new(random_density(&mut rng)).unwrap();
    let report = verify_restoring(&rho, &prop, &build_v0(&PhiParams::zeros()), t).unwrap();
    assert!(report.residual_max > 1e-3);
    assert!(report.max_off_diagonal_error > 1e-4);
}

#[test]
fn sum_objective_dominates_single_target_optima() {
    let (prop, t) = line();
    let sum = optimize_phi(&OptimizationTask::new(Target::SumAll, 12, 1), &prop, t).unwrap();
    for target in Target::ALL.into_iter().filter(|&t| t != Target::SumAll) {
        let single = optimize_phi(&OptimizationTask::new(target, 12, 1), &prop, t).unwrap();
        let single_sum: f64 = single.magnitudes.iter().sum();
        assert!(sum.objective + 1e-6 >= single_sum, "{target}: {single_sum} > {}", sum.objective);
    }
}

#[test]
fn selection_independent_of_thread_count() {
    let (prop, t) = line();
    let task = OptimizationTask::new(Target::L1_01_11, 6, 2);
    let parallel = optimize_phi(&task, &prop, t).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let serial = pool.install(|| optimize_phi(&task, &prop, t).unwrap());
    assert!(parallel.same_outcome(&serial));
}
