mod common;

use abnet_core::qp::{solve, solve_backward, QpError, QpProblem, QpStatus, SolverOptions};
use common::{active_set_oracle, backward_fd_error, gradient_check_options, non_degenerate, random_qp};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn single_row_matches_enumeration() {
    let prob = QpProblem::new(
        DMatrix::identity(2, 2),
        DVector::from_vec(vec![-2.0, 0.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DVector::from_vec(vec![0.5]),
    )
    .unwrap();
    let (u, l) = active_set_oracle(&prob).unwrap();
    assert!((u[0] - 0.5).abs() < 1e-12 && u[1].abs() < 1e-12);
    assert!((l[0] - 1.5).abs() < 1e-12);
    let sol = solve(&prob, &SolverOptions::default()).unwrap();
    assert!((sol.u - u).amax() < 1e-7);
}

#[test]
fn random_problems_match_active_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let prob = random_qp(&mut rng, 6, 12);
        let (u_ref, _) = active_set_oracle(&prob).expect("feasible by construction");
        let sol = solve(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        assert!((&sol.u - &u_ref).amax() < 1e-5, "case {case}: {} vs {}", sol.u, u_ref);
        assert!(sol.kkt_residual <= 1e-6, "case {case}: residual {}", sol.kkt_residual);
        // KKT triple at the stated tolerances.
        assert!(sol.lambda.iter().all(|l| *l >= -1e-9));
        let viol = &prob.g * &sol.u - &prob.h;
        assert!(viol.iter().zip(sol.lambda.iter()).all(|(v, l)| (v * l).abs() <= 1e-6));
        let stat = &prob.q * &sol.u + &prob.c + prob.g.tr_mul(&sol.lambda);
        assert!(stat.amax() <= 1e-6);
    }
}

#[test]
fn backward_matches_central_differences() {
    let opts = gradient_check_options();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    while checked < 50 {
        let prob = random_qp(&mut rng, 5, 8);
        if !non_degenerate(&prob, &opts) {
            continue;
        }
        checked += 1;
        let worst = backward_fd_error(&prob, &opts, 1e-5);
        assert!(worst < 1e-3, "problem {checked}: worst relative error {worst:e}");
    }
}

#[test]
fn single_row_gradient_example() {
    let prob = QpProblem::new(
        DMatrix::identity(2, 2),
        DVector::from_vec(vec![-2.0, 0.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DVector::from_vec(vec![0.5]),
    )
    .unwrap();
    let opts = gradient_check_options();
    let sol = solve(&prob, &opts).unwrap();
    let g = solve_backward(&prob, &sol, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
    assert!((g.dh[0] - 1.0).abs() < 1e-8);
    assert!(g.dc.amax() < 1e-8);
}

#[test]
fn infeasible_box_is_reported() {
    // 0 <= u <= 1 together with u >= 2.
    let prob = QpProblem::new(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::from_row_slice(3, 1, &[1.0, -1.0, -1.0]),
        DVector::from_vec(vec![1.0, 0.0, -2.0]),
    )
    .unwrap();
    assert!(matches!(solve(&prob, &SolverOptions::default()), Err(QpError::Infeasible { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solve_is_deterministic_and_kkt(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prob = random_qp(&mut rng, 6, 12);
        let a = solve(&prob, &SolverOptions::default()).unwrap();
        let b = solve(&prob, &SolverOptions::default()).unwrap();
        prop_assert_eq!(a.u.as_slice(), b.u.as_slice());
        prop_assert_eq!(a.lambda.as_slice(), b.lambda.as_slice());
        prop_assert_eq!(a.status, QpStatus::Optimal);
        prop_assert!(a.kkt_residual <= 1e-6);
    }
}

#[test]
fn easy_interior_problem_converges() {
    let prob = QpProblem::new(
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.6999115200769699, 0.6490701748801486])),
        DVector::from_vec(vec![0.03219420326520535, 0.010212339431686136]),
        DMatrix::from_row_slice(
            5,
            2,
            &[2.0251286238521904, 1.7120232433621883, 1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
        ),
        DVector::from_vec(vec![13.187782852717017, 3.0, 3.0, 5.0, 5.0]),
    )
    .unwrap();
    let sol = solve(&prob, &SolverOptions::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal, "{sol:?}");
    assert!(sol.iterations < 30);
}

#[test]
fn safety_shaped_problems_reach_optimal() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..5000 {
        let q: DVector<f64> = DVector::from_fn(2, |_, _| rng.gen_range(1e-3..3.0));
        let c = DVector::from_fn(2, |_, _| rng.gen_range(-10.0..10.0));
        let a = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let b = rng.gen_range(-2.0..50.0);
        let g = DMatrix::from_row_slice(5, 2, &[a[0], a[1], 1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let h = DVector::from_vec(vec![b, 3.0, 3.0, 5.0, 5.0]);
        let prob = QpProblem::new(DMatrix::from_diagonal(&q), c, g, h).unwrap();
        match solve(&prob, &SolverOptions::default()) {
            Ok(sol) => assert_eq!(sol.status, QpStatus::Optimal, "case {case}: {prob:?}"),
            Err(QpError::Infeasible { .. }) => {}
            Err(e) => panic!("case {case}: {e}"),
        }
    }
}
