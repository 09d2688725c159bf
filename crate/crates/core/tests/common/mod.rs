//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use abnet_core::dynamics::AffineSystem;
use abnet_core::hocbf::ConstraintRow;
use abnet_core::qp::{solve, solve_backward, QpProblem, SolverOptions};
use abnet_core::task::Task;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Relative error with a small floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Random strictly feasible QP with `Q = AᵀA + I`.
pub fn random_qp<R: Rng>(rng: &mut R, max_dim: usize, max_rows: usize) -> QpProblem {
    let n = rng.gen_range(1..=max_dim);
    let m = rng.gen_range(0..=max_rows);
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut q = a.transpose() * &a + DMatrix::identity(n, n);
    q = 0.5 * (&q + q.transpose());
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let g = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let u0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let h = &g * &u0 + DVector::from_fn(m, |_, _| rng.gen_range(0.05..1.0));
    QpProblem::new(q, c, g, h).unwrap()
}

/// Exhaustive active-set enumeration: solve every equality-constrained KKT
/// system with at most `n` active rows and keep the primal-dual feasible one.
pub fn active_set_oracle(prob: &QpProblem) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.dim();
    let m = prob.n_ineq();
    let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;
    for mask in 0u32..(1u32 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if active.len() > n {
            continue;
        }
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&prob.q);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&prob.c));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(j, n + r)] = prob.g[(i, j)];
                kkt[(n + r, j)] = prob.g[(i, j)];
            }
            rhs[n + r] = prob.h[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let u = sol.rows(0, n).into_owned();
        let mut lambda = DVector::zeros(m);
        for (r, &i) in active.iter().enumerate() {
            lambda[i] = sol[n + r];
        }
        let primal_ok = (&prob.g * &u - &prob.h).iter().all(|v| *v <= 1e-9);
        let dual_ok = lambda.iter().all(|v| *v >= -1e-9);
        if primal_ok && dual_ok {
            let obj = 0.5 * u.dot(&(&prob.q * &u)) + prob.c.dot(&u);
            if best.as_ref().is_none_or(|b| obj < b.2) {
                best = Some((u, lambda, obj));
            }
        }
    }
    best.map(|(u, l, _)| (u, l))
}

/// Classical RK4 integration of `ẋ = f(x) + g(x) u` for a signed time `t`.
pub fn rk4_flow(sys: &dyn AffineSystem, x: &[f64], u: &[f64], t: f64, steps: usize) -> Vec<f64> {
    let h = t / steps as f64;
    let add = |a: &[f64], b: &[f64], k: f64| a.iter().zip(b).map(|(a, b)| a + k * b).collect::<Vec<_>>();
    let mut x = x.to_vec();
    for _ in 0..steps {
        let k1 = sys.vector_field(&x, u);
        let k2 = sys.vector_field(&add(&x, &k1, h / 2.0), u);
        let k3 = sys.vector_field(&add(&x, &k2, h / 2.0), u);
        let k4 = sys.vector_field(&add(&x, &k3, h), u);
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x
}

/// Barrier derivatives recovered from flows alone: `[b, L_f b, L_f² b]`,
/// `L_g b` per control and `L_g L_f b` per control, from finite differences
/// of `b` along RK4 flows; control terms come from flows with `u = ±e_j`, using
/// `d²b/dt²|_{u} = L_f² b + L_g L_f b · u` when `L_g b = 0`.
pub struct FlowDerivatives {
    pub chain: [f64; 3],
    pub lg_b: Vec<f64>,
    pub lglf_b: Vec<f64>,
}

pub fn flow_derivatives(sys: &dyn AffineSystem, j: usize, x: &[f64]) -> FlowDerivatives {
    let b = |y: &[f64]| sys.barrier(j, y).unwrap();
    let q = sys.control_dim();
    let zero = vec![0.0; q];
    // Fourth-order central stencils.
    let at = |u: &[f64], t: f64| b(&rk4_flow(sys, x, u, t, 16));
    let e1 = 1e-3;
    let e2 = 3e-3;
    let d1 = |u: &[f64]| {
        (-at(u, 2.0 * e1) + 8.0 * at(u, e1) - 8.0 * at(u, -e1) + at(u, -2.0 * e1)) / (12.0 * e1)
    };
    let d2 = |u: &[f64]| {
        (-at(u, 2.0 * e2) + 16.0 * at(u, e2) - 30.0 * b(x) + 16.0 * at(u, -e2) - at(u, -2.0 * e2)) / (12.0 * e2 * e2)
    };
    let lf = d1(&zero);
    let lf2 = d2(&zero);
    let mut lg_b = Vec::with_capacity(q);
    let mut lglf_b = Vec::with_capacity(q);
    for k in 0..q {
        let mut up = zero.clone();
        up[k] = 1.0;
        let mut dn = zero.clone();
        dn[k] = -1.0;
        lg_b.push((d1(&up) - d1(&dn)) / 2.0);
        lglf_b.push((d2(&up) - d2(&dn)) / 2.0);
    }
    FlowDerivatives {
        chain: [b(x), lf, lf2],
        lg_b,
        lglf_b,
    }
}

/// Uniform random state for either task, kept away from singular geometry.
pub fn random_state<R: Rng>(task: &Task, rng: &mut R) -> Vec<f64> {
    use std::f64::consts::PI;
    match task.id() {
        "robot2d" => loop {
            let x = vec![
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(0.1..2.0),
            ];
            if x[0].hypot(x[1]) > 0.5 {
                return x;
            }
        },
        _ => vec![
            rng.gen_range(-PI..PI),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-PI..PI),
            rng.gen_range(-2.0..2.0),
        ],
    }
}

/// Tight solver settings so finite differences see the exact solution map.
pub fn gradient_check_options() -> SolverOptions {
    SolverOptions {
        tol: 1e-13,
        feas_tol: 1e-12,
        max_iter: 200,
        ..Default::default()
    }
}

/// Rows are either clearly active or clearly inactive at the optimum.
pub fn non_degenerate(prob: &QpProblem, opts: &SolverOptions) -> bool {
    let sol = solve(prob, opts).unwrap();
    sol.lambda
        .iter()
        .zip(sol.slack.iter())
        .all(|(l, s)| (*l > 1e-3 && *s < 1e-9) || (*s > 1e-3 && *l < 1e-9))
}

/// Worst relative error between every block of `solve_backward` (for the
/// loss `w · u*`) and central differences with the given step.
pub fn backward_fd_error(prob: &QpProblem, opts: &SolverOptions, step: f64) -> f64 {
    let w = DVector::from_fn(prob.dim(), |i, _| ((i as f64) * 0.7).sin() + 0.3);
    let loss = |p: &QpProblem| solve(p, opts).unwrap().u.dot(&w);
    let sol = solve(prob, opts).unwrap();
    let gr = solve_backward(prob, &sol, &w).unwrap();
    let fd = |perturb: &dyn Fn(&mut QpProblem, f64)| {
        let mut p = prob.clone();
        perturb(&mut p, step);
        let mut m = prob.clone();
        perturb(&mut m, -step);
        (loss(&p) - loss(&m)) / (2.0 * step)
    };
    let n = prob.dim();
    let mut worst = 0.0f64;
    for i in 0..n {
        worst = worst.max(rel_err(fd(&|p, e| p.c[i] += e), gr.dc[i]));
        for j in 0..=i {
            // Symmetric perturbation of Q.
            let d = fd(&|p, e| {
                p.q[(i, j)] += e;
                if i != j {
                    p.q[(j, i)] += e;
                }
            });
            let an = if i == j { gr.dq[(i, i)] } else { gr.dq[(i, j)] + gr.dq[(j, i)] };
            worst = worst.max(rel_err(d, an));
        }
    }
    for r in 0..prob.n_ineq() {
        worst = worst.max(rel_err(fd(&|p, e| p.h[r] += e), gr.dh[r]));
        for j in 0..n {
            worst = worst.max(rel_err(fd(&|p, e| p.g[(r, j)] += e), gr.dg[(r, j)]));
        }
    }
    worst
}

/// Smallest Euclidean move of `u` onto `a · u ≥ rhs`, nudged inside.
pub fn project_onto_row(row: &ConstraintRow, u: &[f64]) -> Vec<f64> {
    let gap = row.residual(u);
    if gap >= 0.0 {
        return u.to_vec();
    }
    let n2: f64 = row.a.iter().map(|v| v * v).sum();
    let t = (-gap / n2) * (1.0 + 1e-9) + 1e-12;
    u.iter().zip(&row.a).map(|(u, a)| u + t * a).collect()
}
