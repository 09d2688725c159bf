//! A single BarrierNet head: backbone network, safety QP and its gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AffineSystem, DynamicsError};
use crate::hocbf::{ConstraintRow, HocbfCascade, HocbfError, RowGradients};
use crate::nn::{softplus, Mlp, NnError, NodeId, Tape};
use crate::qp::{self, QpError, QpProblem, QpSolution, SolverOptions};
use crate::task::Task;

/// Lower bound added to every diagonal entry of `H`.
pub const H_FLOOR: f64 = 1e-6;
/// Tolerance on `a · u - rhs` after a solve, relative to `1 + |rhs|`.
pub const ROW_TOL: f64 = 1e-6;

static BACKWARD_FAILURES: AtomicU64 = AtomicU64::new(0);

/// Number of QP backward passes that fell back to a zero gradient since
/// process start.
pub fn backward_failures() -> u64 {
    BACKWARD_FAILURES.load(Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierNetError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Hocbf(#[from] HocbfError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("observation has {got} entries, expected {expected}")]
    Observation { expected: usize, got: usize },
}

impl BarrierNetError {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, BarrierNetError::Qp(QpError::Infeasible { .. }))
    }
}

/// Per-feature affine normalization `(z - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean and standard deviation per feature; constant features keep
    /// scale 1.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a [f64]>) -> Option<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for z in samples {
            if n == 0 {
                sum = vec![0.0; z.len()];
                sq = vec![0.0; z.len()];
            }
            for (i, v) in z.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / nf - m * m).max(0.0).sqrt();
                if sd > 1e-9 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Some(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Which part of the (normalized) observation a head sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationMap {
    Identity,
    /// Zeroes the entries whose flag is false; keeps the dimension.
    Mask { keep: Vec<bool> },
    /// Keeps only the listed entries, in order.
    Select { indices: Vec<usize> },
}

impl ObservationMap {
    pub fn out_dim(&self, obs_dim: usize) -> usize {
        match self {
            ObservationMap::Select { indices } => indices.len(),
            _ => obs_dim,
        }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            ObservationMap::Identity => z.to_vec(),
            ObservationMap::Mask { keep } => z
                .iter()
                .zip(keep)
                .map(|(v, k)| if *k { *v } else { 0.0 })
                .collect(),
            ObservationMap::Select { indices } => indices.iter().map(|i| z[*i]).collect(),
        }
    }
}

/// Solved safety QP for one head at one state.
#[derive(Debug, Clone)]
pub struct SafetyQp {
    pub problem: QpProblem,
    pub solution: QpSolution,
    /// Safety rows that entered the QP, in cascade order.
    pub rows: Vec<ConstraintRow>,
    row_grads: Vec<RowGradients>,
    /// Constraints whose row was dropped because `L_g L_f b` vanished.
    pub degenerate: Vec<usize>,
    /// Largest `max(0, rhs - a·u) / (1 + |rhs|)` over safety rows.
    pub row_violation: f64,
}

/// Gradients of a loss with respect to the QP-producing quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyQpGradients {
    pub d_h: Vec<f64>,
    pub d_u_ref: Vec<f64>,
    pub d_lower: Vec<f64>,
    pub d_top: f64,
}

/// `min ½ uᵀ diag(h) u - (h ⊙ u_ref)ᵀ u` subject to one HOCBF row per
/// cascade and the control box.
#[allow(clippy::too_many_arguments)]
pub fn solve_safety_qp(
    sys: &dyn AffineSystem,
    cascades: &[HocbfCascade],
    x: &[f64],
    u_ref: &[f64],
    h: &[f64],
    lower: &[f64],
    top: f64,
    opts: &SolverOptions,
) -> Result<SafetyQp, BarrierNetError> {
    let q = sys.control_dim();
    let mut rows = Vec::new();
    let mut row_grads = Vec::new();
    let mut degenerate = Vec::new();
    for c in cascades {
        let lie = sys.lie_derivatives(c.constraint, x)?;
        match c.row_from_lie(&lie, lower, top) {
            Ok(row) => {
                row_grads.push(c.gradients_from_lie(&lie, lower, top)?);
                rows.push(row);
            }
            Err(HocbfError::DegenerateRow { constraint }) => {
                debug!("constraint {constraint} degenerate at {x:?}, row dropped");
                degenerate.push(constraint);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let bounds = sys.control_bounds();
    let m = rows.len() + 2 * q;
    let mut g = DMatrix::zeros(m, q);
    let mut hv = DVector::zeros(m);
    for (r, row) in rows.iter().enumerate() {
        let (gr, hr) = row.as_leq();
        for j in 0..q {
            g[(r, j)] = gr[j];
        }
        hv[r] = hr;
    }
    for (j, [lo, hi]) in bounds.iter().enumerate() {
        let r = rows.len() + 2 * j;
        g[(r, j)] = 1.0;
        hv[r] = *hi;
        g[(r + 1, j)] = -1.0;
        hv[r + 1] = -lo;
    }
    let qm = DMatrix::from_diagonal(&DVector::from_column_slice(h));
    let c = DVector::from_iterator(q, h.iter().zip(u_ref).map(|(h, u)| -h * u));
    let problem = QpProblem::new(qm, c, g, hv)?;
    let solution = qp::solve(&problem, opts)?;
    let u: Vec<f64> = solution.u.iter().copied().collect();
    let row_violation = rows
        .iter()
        .map(|r| (-r.residual(&u)).max(0.0) / (1.0 + r.rhs.abs()))
        .fold(0.0, f64::max);
    if row_violation > ROW_TOL {
        warn!("safety row violated by {row_violation:.3e} after solve (status {:?})", solution.status);
    }
    Ok(SafetyQp {
        problem,
        solution,
        rows,
        row_grads,
        degenerate,
        row_violation,
    })
}

impl SafetyQp {
    pub fn u(&self) -> Vec<f64> {
        self.solution.u.iter().copied().collect()
    }

    /// Chain rule from `∂ℓ/∂u` to `(h, u_ref, lower penalties, top penalty)`.
    pub fn backward(&self, u_ref: &[f64], grad_u: &[f64]) -> Result<SafetyQpGradients, BarrierNetError> {
        let g = qp::solve_backward(&self.problem, &self.solution, &DVector::from_column_slice(grad_u))?;
        let q = u_ref.len();
        let h: Vec<f64> = self.problem.q.diagonal().iter().copied().collect();
        let d_h = (0..q).map(|i| g.dq[(i, i)] - g.dc[i] * u_ref[i]).collect();
        let d_u_ref = (0..q).map(|i| -g.dc[i] * h[i]).collect();
        let n_lower = self.row_grads.first().map_or(0, |r| r.d_lower.len());
        let mut d_lower = vec![0.0; n_lower];
        let mut d_top = 0.0;
        // Each safety row enters as `h_r = -rhs_r`.
        for (r, rg) in self.row_grads.iter().enumerate() {
            for (k, d) in rg.d_lower.iter().enumerate() {
                d_lower[k] -= g.dh[r] * d;
            }
            d_top -= g.dh[r] * rg.d_top;
        }
        Ok(SafetyQpGradients {
            d_h,
            d_u_ref,
            d_lower,
            d_top,
        })
    }
}

/// Control used at evaluation time when no head has a feasible QP: the
/// minimum-norm control inside the box.
pub fn fallback_control(sys: &dyn AffineSystem) -> Vec<f64> {
    sys.clamp_control(&vec![0.0; sys.control_dim()])
}

/// Backbone plus the observation plumbing in front of it. The backbone
/// emits `[u_ref (q), raw H diagonal (q), raw top penalty (1)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub backbone: Mlp,
    pub normalizer: Normalizer,
    pub obs_map: ObservationMap,
}

/// Everything a head produced at one state.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub u: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub h: Vec<f64>,
    pub top: f64,
    pub qp: SafetyQp,
}

/// Tape nodes of a head's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub u: NodeId,
    pub u_ref: NodeId,
    pub top: NodeId,
}

impl Head {
    /// `hidden` lists the hidden widths; input and output sizes follow from
    /// the task and observation map.
    pub fn new<R: Rng + ?Sized>(
        task: &Task,
        hidden: &[usize],
        normalizer: Normalizer,
        obs_map: ObservationMap,
        rng: &mut R,
    ) -> Self {
        let q = task.sys().control_dim();
        let mut dims = vec![obs_map.out_dim(task.obs_dim())];
        dims.extend_from_slice(hidden);
        dims.push(2 * q + 1);
        Self {
            backbone: Mlp::new(&dims, rng),
            normalizer,
            obs_map,
        }
    }

    pub fn control_dim(&self) -> usize {
        (self.backbone.output_dim() - 1) / 2
    }

    /// Normalized, mapped backbone input.
    pub fn prepare(&self, z: &[f64]) -> Result<Vec<f64>, BarrierNetError> {
        if z.len() != self.normalizer.dim() {
            return Err(BarrierNetError::Observation {
                expected: self.normalizer.dim(),
                got: z.len(),
            });
        }
        Ok(self.obs_map.apply(&self.normalizer.apply(z)))
    }

    fn decode(&self, raw: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let q = self.control_dim();
        let u_ref = raw[..q].to_vec();
        let h = raw[q..2 * q].iter().map(|v| softplus(*v) + H_FLOOR).collect();
        (u_ref, h, softplus(raw[2 * q]))
    }

    /// Tape-free forward pass.
    pub fn evaluate(
        &self,
        task: &Task,
        cascades: &[HocbfCascade],
        x: &[f64],
        z: &[f64],
        lower: &[f64],
        opts: &SolverOptions,
    ) -> Result<HeadOutput, BarrierNetError> {
        let raw = self.backbone.eval(&self.prepare(z)?)?;
        let (u_ref, h, top) = self.decode(&raw);
        let qp = solve_safety_qp(task.sys(), cascades, x, &u_ref, &h, lower, top, opts)?;
        Ok(HeadOutput {
            u: qp.u(),
            u_ref,
            h,
            top,
            qp,
        })
    }

    /// Records the forward pass on `tape`; `lower` is the node holding the
    /// shared lower-order penalties. Values match [`Head::evaluate`] bit for
    /// bit.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        task: &Task,
        cascades: &[HocbfCascade],
        x: &[f64],
        z: &[f64],
        lower: NodeId,
        opts: &SolverOptions,
    ) -> Result<HeadNodes, BarrierNetError> {
        let q = self.control_dim();
        let input = tape.input(self.prepare(z)?);
        let raw = self.backbone.forward(tape, input)?;
        let u_ref = tape.slice(raw, 0, q)?;
        let h_raw = tape.slice(raw, q, q)?;
        let h_sp = tape.softplus(h_raw);
        let h = tape.add_const(h_sp, H_FLOOR);
        let p_raw = tape.slice(raw, 2 * q, 1)?;
        let top = tape.softplus(p_raw);

        let u_ref_v = tape.value(u_ref).to_vec();
        let qp = solve_safety_qp(
            task.sys(),
            cascades,
            x,
            &u_ref_v,
            tape.value(h),
            tape.value(lower),
            tape.value(top)[0],
            opts,
        )?;
        let n_lower = tape.value(lower).len();
        let u = tape.custom(
            &[h, u_ref, lower, top],
            qp.u(),
            Box::new(move |grad_u| match qp.backward(&u_ref_v, grad_u) {
                Ok(g) => vec![g.d_h, g.d_u_ref, g.d_lower, vec![g.d_top]],
                Err(e) => {
                    BACKWARD_FAILURES.fetch_add(1, Ordering::Relaxed);
                    debug!("QP backward failed ({e}), using zero gradient");
                    vec![vec![0.0; q], vec![0.0; q], vec![0.0; n_lower], vec![0.0]]
                }
            }),
        );
        Ok(HeadNodes { u, u_ref, top })
    }
}

/// `‖u - u*‖² + λ_ref ‖u_ref - u*‖²` (both as means over components).
pub fn head_loss(tape: &mut Tape<'_>, nodes: &HeadNodes, label: &[f64], lambda_ref: f64) -> Result<NodeId, NnError> {
    let y = tape.input(label.to_vec());
    let l_u = tape.mse(nodes.u, y)?;
    let l_ref = tape.mse(nodes.u_ref, y)?;
    let l_ref = tape.scale(l_ref, lambda_ref);
    tape.add(l_u, l_ref)
}
