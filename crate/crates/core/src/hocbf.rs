//! High-order control barrier function cascades and their QP rows.
//!
//! With linear class-K functions `α_i(s) = κ_i s` and penalties `p_i` that
//! are constant within a sampling interval, the cascade
//! `ψ_i = ψ̇_{i-1} + p_i κ_i ψ_{i-1}` is the operator polynomial
//! `Π_{k≤i} (d/dt + p_k κ_k)` applied to `b`. Expanding it gives the row
//! coefficients on `L_f^j b` directly, for any relative degree.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AffineSystem, DynamicsError, LieTerms};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HocbfError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("constraint {constraint} has a degenerate row (|L_g L_f b| below tolerance)")]
    DegenerateRow { constraint: usize },
    #[error("penalties must be nonnegative and finite, got {0:?}")]
    BadPenalty(Vec<f64>),
    #[error("class-K slope must be positive, got {0}")]
    BadSlope(f64),
    #[error("cascade of degree {degree} needs {expected} lower penalties, got {got}")]
    PenaltyCount { degree: usize, expected: usize, got: usize },
    #[error("only relative degree 2 has closed-form Lie derivatives, cascade has degree {0}")]
    UnsupportedDegree(usize),
}

/// Linear class-K function `α(s) = κ s`, `κ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassK {
    slope: f64,
}

impl ClassK {
    pub fn linear(slope: f64) -> Result<Self, HocbfError> {
        if !(slope > 0.0) || !slope.is_finite() {
            return Err(HocbfError::BadSlope(slope));
        }
        Ok(Self { slope })
    }

    pub fn identity() -> Self {
        Self { slope: 1.0 }
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.slope * s
    }

    /// Nonnegative combination `Σ c_k α_k`. `None` unless it is again
    /// class-K, i.e. at least one weight is positive.
    pub fn combine(parts: &[(f64, ClassK)]) -> Option<ClassK> {
        if parts.iter().any(|(c, _)| *c < 0.0 || !c.is_finite()) {
            return None;
        }
        let slope: f64 = parts.iter().map(|(c, k)| c * k.slope).sum();
        ClassK::linear(slope).ok()
    }
}

/// One safety constraint `b_j(x) ≥ 0` with its class-K chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HocbfCascade {
    pub constraint: usize,
    /// `α_1 .. α_m`; its length is the relative degree.
    pub alphas: Vec<ClassK>,
}

/// `a · u ≥ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub constraint: usize,
    pub a: Vec<f64>,
    pub rhs: f64,
}

impl ConstraintRow {
    /// `a · u - rhs`; nonnegative when the row holds.
    pub fn residual(&self, u: &[f64]) -> f64 {
        self.a.iter().zip(u).map(|(a, u)| a * u).sum::<f64>() - self.rhs
    }

    /// The row as `g · u ≤ h` for a [`crate::qp::QpProblem`].
    pub fn as_leq(&self) -> (Vec<f64>, f64) {
        (self.a.iter().map(|v| -v).collect(), -self.rhs)
    }
}

/// `∂rhs/∂p` for each lower penalty and the top one. The coefficients `a`
/// do not depend on the penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGradients {
    pub d_lower: Vec<f64>,
    pub d_top: f64,
}

/// Coefficients of `Π (s + r_k)` in increasing powers of `s`.
fn poly_from_roots(roots: &[f64]) -> Vec<f64> {
    let mut coef = vec![1.0];
    for r in roots {
        let mut next = vec![0.0; coef.len() + 1];
        for (i, c) in coef.iter().enumerate() {
            next[i] += c * r;
            next[i + 1] += c;
        }
        coef = next;
    }
    coef
}

fn check_penalties(p: &[f64]) -> Result<(), HocbfError> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(HocbfError::BadPenalty(p.to_vec()));
    }
    Ok(())
}

impl HocbfCascade {
    /// Relative-degree-2 cascade with identity class-K functions (all gain
    /// lives in the penalties).
    pub fn degree_two(constraint: usize) -> Self {
        Self {
            constraint,
            alphas: vec![ClassK::identity(); 2],
        }
    }

    /// One degree-two cascade per constraint registered on `sys`.
    pub fn for_system(sys: &dyn AffineSystem) -> Vec<Self> {
        (0..sys.num_constraints()).map(Self::degree_two).collect()
    }

    pub fn degree(&self) -> usize {
        self.alphas.len()
    }

    fn lie(&self, sys: &dyn AffineSystem, x: &[f64]) -> Result<LieTerms, HocbfError> {
        if self.degree() != 2 {
            return Err(HocbfError::UnsupportedDegree(self.degree()));
        }
        Ok(sys.lie_derivatives(self.constraint, x)?)
    }

    fn check_lower(&self, lower: &[f64]) -> Result<(), HocbfError> {
        if lower.len() + 1 != self.degree() {
            return Err(HocbfError::PenaltyCount {
                degree: self.degree(),
                expected: self.degree() - 1,
                got: lower.len(),
            });
        }
        check_penalties(lower)
    }

    fn roots(&self, lower: &[f64], top: f64) -> Vec<f64> {
        lower
            .iter()
            .chain(std::iter::once(&top))
            .zip(&self.alphas)
            .map(|(p, a)| p * a.slope())
            .collect()
    }

    /// `ψ_0 .. ψ_{m-1}` from the drift chain `[b, L_f b, ..]`.
    pub fn psi_from_chain(&self, chain: &[f64], lower: &[f64]) -> Result<Vec<f64>, HocbfError> {
        self.check_lower(lower)?;
        let roots = self.roots(lower, 0.0);
        Ok((0..self.degree())
            .map(|i| {
                let coef = poly_from_roots(&roots[..i]);
                coef.iter().zip(chain).map(|(c, l)| c * l).sum()
            })
            .collect())
    }

    /// `ψ_0 .. ψ_{m-1}` at `x`.
    pub fn psi_values(&self, sys: &dyn AffineSystem, x: &[f64], lower: &[f64]) -> Result<Vec<f64>, HocbfError> {
        let lie = self.lie(sys, x)?;
        self.psi_from_chain(&lie.drift_chain(), lower)
    }

    /// Row from precomputed Lie terms; see [`HocbfCascade::assemble_row`].
    pub fn row_from_lie(&self, lie: &LieTerms, lower: &[f64], top: f64) -> Result<ConstraintRow, HocbfError> {
        self.check_lower(lower)?;
        check_penalties(&[top])?;
        if lie.is_singular() {
            return Err(HocbfError::DegenerateRow {
                constraint: self.constraint,
            });
        }
        let chain = lie.drift_chain();
        let coef = poly_from_roots(&self.roots(lower, top));
        let m = self.degree();
        let rhs = -coef.iter().zip(&chain).take(m + 1).map(|(c, l)| c * l).sum::<f64>();
        Ok(ConstraintRow {
            constraint: self.constraint,
            a: lie.lglf_b.clone(),
            rhs,
        })
    }

    /// `L_g L_f b · u ≥ -[L_f² b + (p₁+p_m) L_f b + p₁ p_m b]` for degree two.
    pub fn assemble_row(
        &self,
        sys: &dyn AffineSystem,
        x: &[f64],
        lower: &[f64],
        top: f64,
    ) -> Result<ConstraintRow, HocbfError> {
        let lie = self.lie(sys, x)?;
        self.row_from_lie(&lie, lower, top)
    }

    pub fn gradients_from_lie(&self, lie: &LieTerms, lower: &[f64], top: f64) -> Result<RowGradients, HocbfError> {
        self.check_lower(lower)?;
        check_penalties(&[top])?;
        let chain = lie.drift_chain();
        let roots = self.roots(lower, top);
        let m = self.degree();
        let d = |k: usize| {
            let others: Vec<f64> = roots.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, r)| *r).collect();
            let coef = poly_from_roots(&others);
            -self.alphas[k].slope() * coef.iter().zip(&chain).map(|(c, l)| c * l).sum::<f64>()
        };
        Ok(RowGradients {
            d_lower: (0..m - 1).map(d).collect(),
            d_top: d(m - 1),
        })
    }

    /// Analytic `∂rhs/∂(p₁, p_m)`.
    pub fn row_gradients(
        &self,
        sys: &dyn AffineSystem,
        x: &[f64],
        lower: &[f64],
        top: f64,
    ) -> Result<RowGradients, HocbfError> {
        let lie = self.lie(sys, x)?;
        self.gradients_from_lie(&lie, lower, top)
    }
}

/// Residual of the fused row `a · u - Σ_k w_k rhs_k` for rows that differ
/// only in their right-hand side. Nonnegative whenever every head row holds
/// at its own control and `w` lies on the simplex.
pub fn fused_row_residual(rows: &[ConstraintRow], weights: &[f64], u: &[f64]) -> f64 {
    let a = &rows[0].a;
    let au: f64 = a.iter().zip(u).map(|(a, u)| a * u).sum();
    au - rows.iter().zip(weights).map(|(r, w)| w * r.rhs).sum::<f64>()
}
