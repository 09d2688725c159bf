//! Dense convex QP with inequality constraints and its implicit-function
//! backward pass.
//!
//! Problems have the form
//!
//! ```text
//! minimize    ½ uᵀ Q u + cᵀ u
//! subject to  G u ≤ h
//! ```
//!
//! and are solved with a primal-dual interior-point method using Mehrotra's
//! predictor-corrector. The reduced Newton system `Q + Gᵀ diag(λ/s) G` is
//! factored with a dense Cholesky decomposition. Problems here are tiny
//! (a handful of controls, a few dozen rows at most), so nothing is sparse.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible eigenvalue of `Q`.
pub const PD_EPS: f64 = 1e-8;
/// Tolerance on the symmetry of `Q`.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Tikhonov regularization applied to the KKT system in the backward pass.
pub const KKT_REGULARIZATION: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("cost matrix is not symmetric positive definite (min eigenvalue {min_eig:e})")]
    IllConditioned { min_eig: f64 },
    #[error("no u satisfies G u <= h (max violation {max_violation:e})")]
    Infeasible { max_violation: f64 },
    #[error("solver did not converge within {0} iterations")]
    MaxIterations(usize),
    #[error("KKT system is singular after regularization")]
    SingularKkt,
    #[error("backward pass needs an optimal solution, got {0:?}")]
    NotOptimal(QpStatus),
}

/// `minimize ½uᵀQu + cᵀu  s.t.  Gu ≤ h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Interior-point slacks `h - G u` at the returned iterate.
    pub slack: DVector<f64>,
    pub status: QpStatus,
    /// Max-norm of the KKT conditions at the returned point.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Sensitivities of a scalar loss with respect to every QP parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct QpGradients {
    pub dq: DMatrix<f64>,
    pub dc: DVector<f64>,
    pub dg: DMatrix<f64>,
    pub dh: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Target duality gap `sᵀλ`.
    pub tol: f64,
    /// Primal and dual residual tolerance, scaled by `1 + ‖h‖∞` / `1 + ‖c‖∞`.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Max violation above which the phase-one check declares infeasibility.
    pub infeasibility_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            feas_tol: 1e-10,
            max_iter: 60,
            infeasibility_tol: 1e-6,
        }
    }
}

impl QpProblem {
    /// Builds a problem after checking shapes, finiteness and symmetry of `Q`.
    /// Positive definiteness is checked by [`solve`].
    pub fn new(
        q: DMatrix<f64>,
        c: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self, QpError> {
        let prob = Self { q, c, g, h };
        prob.validate()?;
        Ok(prob)
    }

    /// Problem with no inequality rows.
    pub fn unconstrained(q: DMatrix<f64>, c: DVector<f64>) -> Result<Self, QpError> {
        let n = c.len();
        Self::new(q, c, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.c.len();
        if self.q.nrows() != n || self.q.ncols() != n {
            return Err(QpError::Shape(format!(
                "Q is {}x{}, expected {n}x{n}",
                self.q.nrows(),
                self.q.ncols()
            )));
        }
        if self.g.ncols() != n || self.g.nrows() != self.h.len() {
            return Err(QpError::Shape(format!(
                "G is {}x{}, h has {} rows, {n} variables",
                self.g.nrows(),
                self.g.ncols(),
                self.h.len()
            )));
        }
        for (name, ok) in [
            ("Q", self.q.iter().all(|v| v.is_finite())),
            ("c", self.c.iter().all(|v| v.is_finite())),
            ("G", self.g.iter().all(|v| v.is_finite())),
            ("h", self.h.iter().all(|v| v.is_finite())),
        ] {
            if !ok {
                return Err(QpError::NonFinite(name));
            }
        }
        for i in 0..n {
            for j in 0..i {
                if (self.q[(i, j)] - self.q[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(QpError::Shape(format!("Q is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    fn check_pd(&self) -> Result<(), QpError> {
        let min_eig = if self.dim() == 0 {
            f64::INFINITY
        } else if self.is_diagonal() {
            self.q.diagonal().min()
        } else {
            self.q.clone().symmetric_eigenvalues().min()
        };
        if !(min_eig >= PD_EPS) {
            return Err(QpError::IllConditioned { min_eig });
        }
        Ok(())
    }

    fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.q[(i, j)] == 0.0))
    }

    /// Max-norm KKT residual of `(u, λ)`: stationarity, primal feasibility,
    /// dual feasibility and complementary slackness.
    pub fn kkt_residual(&self, u: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        let stat = &self.q * u + &self.c + self.g.tr_mul(lambda);
        let viol = &self.g * u - &self.h;
        let mut r = stat.amax();
        for i in 0..self.n_ineq() {
            r = r
                .max(viol[i].max(0.0))
                .max((-lambda[i]).max(0.0))
                .max((lambda[i] * viol[i]).abs());
        }
        r
    }
}

/// Solves the QP.
///
/// Returns `Err(Infeasible)` when the phase-one check finds no point with
/// `Gu ≤ h`, and `Ok` with [`QpStatus::MaxIter`] when the iteration budget
/// runs out on a feasible problem (the best iterate is returned).
pub fn solve(prob: &QpProblem, opts: &SolverOptions) -> Result<QpSolution, QpError> {
    prob.validate()?;
    prob.check_pd()?;

    if prob.n_ineq() == 0 {
        let u = prob
            .q
            .clone()
            .cholesky()
            .ok_or(QpError::IllConditioned { min_eig: 0.0 })?
            .solve(&(-&prob.c));
        let kkt_residual = prob.kkt_residual(&u, &DVector::zeros(0));
        return Ok(QpSolution {
            u,
            lambda: DVector::zeros(0),
            slack: DVector::zeros(0),
            status: QpStatus::Optimal,
            kkt_residual,
            iterations: 0,
        });
    }

    match interior_point(prob, opts) {
        Ok(it) => {
            let kkt_residual = prob.kkt_residual(&it.u, &it.lambda);
            Ok(QpSolution {
                u: it.u,
                lambda: it.lambda,
                slack: it.s,
                status: QpStatus::Optimal,
                kkt_residual,
                iterations: it.iterations,
            })
        }
        Err(best) => {
            let max_violation = min_max_violation(prob, opts);
            if max_violation > opts.infeasibility_tol {
                return Err(QpError::Infeasible { max_violation });
            }
            let Some(best) = best else {
                return Err(QpError::MaxIterations(opts.max_iter));
            };
            let kkt_residual = prob.kkt_residual(&best.u, &best.lambda);
            Ok(QpSolution {
                u: best.u,
                lambda: best.lambda,
                slack: best.s,
                status: QpStatus::MaxIter,
                kkt_residual,
                iterations: best.iterations,
            })
        }
    }
}

#[derive(Debug, Clone)]
struct Iterate {
    u: DVector<f64>,
    s: DVector<f64>,
    lambda: DVector<f64>,
    iterations: usize,
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

/// Mehrotra predictor-corrector. `Err` carries the last finite iterate, if any.
fn interior_point(prob: &QpProblem, opts: &SolverOptions) -> Result<Iterate, Option<Iterate>> {
    let (q, c, g, h) = (&prob.q, &prob.c, &prob.g, &prob.h);
    let m = prob.n_ineq() as f64;
    let h_scale = 1.0 + h.amax();
    let c_scale = 1.0 + c.amax();

    // Initial point from [[Q, Gᵀ], [G, -I]] [u; z] = [-c; h].
    let k0 = q + g.tr_mul(g);
    let Some(chol0) = k0.cholesky() else {
        return Err(None);
    };
    let mut u = chol0.solve(&(-c + g.tr_mul(h)));
    let z = g * &u - h;
    let mut s = -z.clone();
    let mut lambda = z;
    let shift = |v: &mut DVector<f64>| {
        let a = -v.min();
        if a >= 0.0 {
            v.add_scalar_mut(1.0 + a);
        }
    };
    shift(&mut s);
    shift(&mut lambda);

    let mut last: Option<Iterate> = None;
    for iter in 0..opts.max_iter {
        let r_d = q * &u + c + g.tr_mul(&lambda);
        let r_p = g * &u + &s - h;
        let gap = s.dot(&lambda);
        if !gap.is_finite() || lambda.amax() > 1e12 || u.amax() > 1e12 {
            return Err(last);
        }
        last = Some(Iterate {
            u: u.clone(),
            s: s.clone(),
            lambda: lambda.clone(),
            iterations: iter,
        });
        if gap <= opts.tol && r_p.amax() <= opts.feas_tol * h_scale && r_d.amax() <= opts.feas_tol * c_scale {
            return Ok(last.unwrap());
        }
        let mu = gap / m;

        let w = lambda.component_div(&s);
        let mut kkt = q.clone();
        let gw = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * w[i]);
        kkt.gemm_tr(1.0, g, &gw, 1.0);
        let Some(chol) = kkt.cholesky() else {
            return Err(last);
        };

        let newton = |r_c: &DVector<f64>| {
            let rhs = -&r_d - g.tr_mul(&w.component_mul(&r_p)) + g.tr_mul(&r_c.component_div(&s));
            let du = chol.solve(&rhs);
            let dl = w.component_mul(&(g * &du + &r_p)) - r_c.component_div(&s);
            let ds = -(r_c + s.component_mul(&dl)).component_div(&lambda);
            (du, ds, dl)
        };

        // Predictor.
        let r_c_aff = s.component_mul(&lambda);
        let (_, ds_a, dl_a) = newton(&r_c_aff);
        let a_aff = 1f64.min(max_step(&s, &ds_a)).min(max_step(&lambda, &dl_a));
        let mu_aff = (&s + a_aff * &ds_a).dot(&(&lambda + a_aff * &dl_a)) / m;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        let merit = |u: &DVector<f64>, s: &DVector<f64>, l: &DVector<f64>| {
            s.dot(l) / m + (g * u + s - h).amax() / h_scale + (q * u + c + g.tr_mul(l)).amax() / c_scale
        };
        let take = |(du, ds, dl): (DVector<f64>, DVector<f64>, DVector<f64>)| {
            let alpha = 1f64.min(0.99 * max_step(&s, &ds).min(max_step(&lambda, &dl)));
            let next = (&u + alpha * du, &s + alpha * ds, &lambda + alpha * dl);
            let phi = merit(&next.0, &next.1, &next.2);
            (alpha, next, phi)
        };

        // Corrector, falling back to a plain centred step when the
        // second-order term makes things worse (it can cycle otherwise).
        let r_c = &r_c_aff + ds_a.component_mul(&dl_a) - DVector::from_element(s.len(), sigma * mu);
        let mut step = take(newton(&r_c));
        if !(step.2 < merit(&u, &s, &lambda)) {
            let r_c = r_c_aff - DVector::from_element(s.len(), sigma.max(0.1) * mu);
            let plain = take(newton(&r_c));
            if plain.2 < step.2 || !step.2.is_finite() {
                step = plain;
            }
        }
        let (alpha, (u_next, s_next, l_next), _) = step;
        if !(alpha > 0.0) || !u_next.iter().all(|v| v.is_finite()) {
            return Err(last);
        }
        u = u_next;
        s = s_next;
        lambda = l_next;
    }
    Err(last)
}

/// Smallest achievable `max_i (G u - h)_i`, found by a regularized phase-one
/// QP over `(u, t)`: minimize `t + δ/2 (‖u‖² + t²)` s.t. `Gu - t ≤ h`, `t ≥ -1`.
fn min_max_violation(prob: &QpProblem, opts: &SolverOptions) -> f64 {
    const DELTA: f64 = 1e-10;
    let n = prob.dim();
    let rows = prob.n_ineq();
    let mut g = DMatrix::zeros(rows + 1, n + 1);
    g.view_mut((0, 0), (rows, n)).copy_from(&prob.g);
    for i in 0..rows {
        g[(i, n)] = -1.0;
    }
    g[(rows, n)] = -1.0;
    let mut h = DVector::zeros(rows + 1);
    h.rows_mut(0, rows).copy_from(&prob.h);
    h[rows] = 1.0;
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    let phase_one = QpProblem {
        q: DMatrix::identity(n + 1, n + 1) * DELTA,
        c,
        g,
        h,
    };
    let p1_opts = SolverOptions {
        max_iter: opts.max_iter.max(100),
        ..*opts
    };
    match interior_point(&phase_one, &p1_opts) {
        Ok(it) | Err(Some(it)) => {
            let u = it.u.rows(0, n).into_owned();
            (&prob.g * u - &prob.h).max()
        }
        Err(None) => f64::INFINITY,
    }
}

/// Differentiates `u*` through the KKT conditions.
///
/// Solves `[[Q, Gᵀ D(λ)], [G, D(Gu - h)]] [d_u; d_λ] = [-∂ℓ/∂u; 0]` (the
/// transposed KKT differential) and maps `(d_u, d_λ)` to the four parameter
/// blocks. The system is Tikhonov-regularized by [`KKT_REGULARIZATION`].
pub fn solve_backward(
    prob: &QpProblem,
    sol: &QpSolution,
    grad_u: &DVector<f64>,
) -> Result<QpGradients, QpError> {
    let n = prob.dim();
    let m = prob.n_ineq();
    if grad_u.len() != n {
        return Err(QpError::Shape(format!("grad_u has {} entries, expected {n}", grad_u.len())));
    }
    if sol.status != QpStatus::Optimal {
        return Err(QpError::NotOptimal(sol.status));
    }
    let u = &sol.u;
    let lambda = &sol.lambda;

    if m == 0 {
        let d_u = -prob
            .q
            .clone()
            .cholesky()
            .ok_or(QpError::IllConditioned { min_eig: 0.0 })?
            .solve(grad_u);
        return Ok(grads_from(prob, u, lambda, &d_u, &DVector::zeros(0)));
    }

    let resid = &prob.g * u - &prob.h;
    let dim = n + m;
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(&prob.q);
    for i in 0..m {
        for j in 0..n {
            k[(j, n + i)] = prob.g[(i, j)] * lambda[i];
            k[(n + i, j)] = prob.g[(i, j)];
        }
        k[(n + i, n + i)] = resid[i] - KKT_REGULARIZATION;
    }
    for j in 0..n {
        k[(j, j)] += KKT_REGULARIZATION;
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-grad_u));

    let lu = k.lu();
    let x = lu.solve(&rhs).ok_or(QpError::SingularKkt)?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(QpError::SingularKkt);
    }
    let d_u = x.rows(0, n).into_owned();
    let d_l = x.rows(n, m).into_owned();
    Ok(grads_from(prob, u, lambda, &d_u, &d_l))
}

fn grads_from(
    prob: &QpProblem,
    u: &DVector<f64>,
    lambda: &DVector<f64>,
    d_u: &DVector<f64>,
    d_l: &DVector<f64>,
) -> QpGradients {
    let dq = 0.5 * (d_u * u.transpose() + u * d_u.transpose());
    let dl_scaled = lambda.component_mul(d_l);
    let dg = &dl_scaled * u.transpose() + lambda * d_u.transpose();
    let dh = -dl_scaled;
    let _ = prob;
    QpGradients {
        dq,
        dc: d_u.clone(),
        dg,
        dh,
    }
}
