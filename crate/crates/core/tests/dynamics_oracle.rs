mod common;

use abnet_core::dynamics::step;
use abnet_core::task::Task;
use common::{flow_derivatives, random_state, rel_err, rk4_flow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_lie_terms(task: &Task, seed: u64) {
    let sys = task.sys();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let x = random_state(task, &mut rng);
        for j in 0..sys.num_constraints() {
            let lie = sys.lie_derivatives(j, &x).unwrap();
            let fd = flow_derivatives(sys, j, &x);
            for (a, b) in lie.drift_chain().iter().zip(&fd.chain) {
                worst = worst.max(rel_err(*a, *b));
            }
            for (a, b) in lie.lglf_b.iter().zip(&fd.lglf_b) {
                worst = worst.max(rel_err(*a, *b));
            }
            assert!(fd.lg_b.iter().all(|v| v.abs() < 1e-8), "L_g b = {:?} at {x:?}", fd.lg_b);
        }
    }
    assert!(worst < 1e-5, "{}: worst relative error {worst:e}", task.id());
}

#[test]
fn robot_lie_terms_match_flow_differences() {
    check_lie_terms(&Task::robot2d(), 1);
}

#[test]
fn arm_lie_terms_match_flow_differences() {
    check_lie_terms(&Task::arm2(), 2);
}

#[test]
fn euler_step_approaches_rk4_as_dt_shrinks() {
    for task in [Task::robot2d(), Task::arm2()] {
        let sys = task.sys();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_state(&task, &mut rng);
        let u = vec![0.3, -0.2];
        let err = |dt: f64| {
            let e = step(sys, &x, &u, dt).unwrap();
            let r = rk4_flow(sys, &x, &u, dt, 16);
            e.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (err(1e-2), err(1e-3));
        // Local Euler error is second order in dt.
        assert!(fine < coarse / 50.0, "{}: {coarse:e} vs {fine:e}", task.id());
    }
}

#[test]
fn stationary_robot_has_no_drift_derivatives() {
    let task = Task::robot2d();
    let lie = task.sys().lie_derivatives(0, &[3.0, -1.0, 0.7, 0.0]).unwrap();
    assert_eq!(lie.lf_b, 0.0);
    assert_eq!(lie.lf2_b, 0.0);
}
