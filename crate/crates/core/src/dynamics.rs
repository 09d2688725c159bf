//! Control-affine systems `ẋ = f(x) + g(x) u` with circular-obstacle safety
//! constraints and closed-form Lie derivatives.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows whose control coefficients fall below this (max-norm) are degenerate.
pub const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("state became non-finite")]
    NonFiniteState,
    #[error("unknown safety constraint {0}")]
    UnknownConstraint(usize),
    #[error("expected a {expected}-vector for {what}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    /// `b = (px - x0)² + (py - y0)² - R²`.
    pub fn barrier(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.center[0];
        let dy = py - self.center[1];
        dx * dx + dy * dy - self.radius * self.radius
    }
}

/// `b`, its first two Lie derivatives along `f`, and the control
/// coefficients of the second derivative. Relative degree is 2, so
/// `L_g b = 0` and the control enters through `L_g L_f b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LieTerms {
    pub b: f64,
    pub lf_b: f64,
    pub lf2_b: f64,
    pub lglf_b: Vec<f64>,
}

impl LieTerms {
    /// `[b, L_f b, L_f² b]`.
    pub fn drift_chain(&self) -> [f64; 3] {
        [self.b, self.lf_b, self.lf2_b]
    }

    pub fn is_singular(&self) -> bool {
        self.lglf_b.iter().all(|v| v.abs() < SINGULAR_TOL)
    }
}

pub trait AffineSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn drift(&self, x: &[f64]) -> Vec<f64>;
    /// `g(x)`, `n x q`.
    fn actuation(&self, x: &[f64]) -> DMatrix<f64>;
    fn control_bounds(&self) -> &[[f64; 2]];
    fn num_constraints(&self) -> usize;
    fn barrier(&self, constraint: usize, x: &[f64]) -> Result<f64, DynamicsError>;
    fn lie_derivatives(&self, constraint: usize, x: &[f64]) -> Result<LieTerms, DynamicsError>;

    /// `f(x) + g(x) u`.
    fn vector_field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let g = self.actuation(x);
        let mut dx = self.drift(x);
        for (i, d) in dx.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                *d += g[(i, j)] * uj;
            }
        }
        dx
    }

    /// Smallest barrier value over all registered constraints.
    fn min_barrier(&self, x: &[f64]) -> f64 {
        (0..self.num_constraints())
            .filter_map(|j| self.barrier(j, x).ok())
            .fold(f64::INFINITY, f64::min)
    }

    fn clamp_control(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.control_bounds())
            .map(|(v, [lo, hi])| v.clamp(*lo, *hi))
            .collect()
    }
}

/// Planar robot: state `(x, y, θ, v)`, controls `(angular rate, acceleration)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robot2d {
    pub obstacles: Vec<Obstacle>,
    pub control_bounds: Vec<[f64; 2]>,
}

impl Default for Robot2d {
    fn default() -> Self {
        Self {
            obstacles: vec![Obstacle {
                center: [0.0, 0.0],
                radius: 2.0,
            }],
            control_bounds: vec![[-3.0, 3.0], [-5.0, 5.0]],
        }
    }
}

impl Robot2d {
    fn obstacle(&self, j: usize) -> Result<&Obstacle, DynamicsError> {
        self.obstacles.get(j).ok_or(DynamicsError::UnknownConstraint(j))
    }
}

impl AffineSystem for Robot2d {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        vec![x[3] * x[2].cos(), x[3] * x[2].sin(), 0.0, 0.0]
    }

    fn actuation(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    }

    fn control_bounds(&self) -> &[[f64; 2]] {
        &self.control_bounds
    }

    fn num_constraints(&self) -> usize {
        self.obstacles.len()
    }

    fn barrier(&self, j: usize, x: &[f64]) -> Result<f64, DynamicsError> {
        Ok(self.obstacle(j)?.barrier(x[0], x[1]))
    }

    fn lie_derivatives(&self, j: usize, x: &[f64]) -> Result<LieTerms, DynamicsError> {
        let obs = self.obstacle(j)?;
        let (dx, dy) = (x[0] - obs.center[0], x[1] - obs.center[1]);
        let (s, c) = x[2].sin_cos();
        let v = x[3];
        Ok(LieTerms {
            b: obs.barrier(x[0], x[1]),
            lf_b: 2.0 * dx * v * c + 2.0 * dy * v * s,
            lf2_b: 2.0 * v * v,
            lglf_b: vec![-2.0 * dx * v * s + 2.0 * dy * v * c, 2.0 * dx * c + 2.0 * dy * s],
        })
    }
}

/// Two-link planar arm with double-integrator joints: state
/// `(θ₁, ω₁, θ₂, ω₂)` with absolute link angles, controls are joint
/// angular accelerations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLinkArm {
    pub l1: f64,
    pub l2: f64,
    pub obstacles: Vec<Obstacle>,
    pub control_bounds: Vec<[f64; 2]>,
}

impl Default for TwoLinkArm {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            obstacles: vec![Obstacle {
                center: [0.9, 0.9],
                radius: 0.3,
            }],
            control_bounds: vec![[-10.0, 10.0], [-10.0, 10.0]],
        }
    }
}

impl TwoLinkArm {
    /// End-effector position `(l₁cosθ₁ + l₂cosθ₂, l₁sinθ₁ + l₂sinθ₂)`.
    pub fn fk(&self, theta1: f64, theta2: f64) -> [f64; 2] {
        [
            self.l1 * theta1.cos() + self.l2 * theta2.cos(),
            self.l1 * theta1.sin() + self.l2 * theta2.sin(),
        ]
    }

    /// Absolute link angles placing the end effector at `target`, elbow
    /// bent counter-clockwise (`θ₂ ≥ θ₁` up to wrapping). `None` when the
    /// target is out of reach.
    pub fn ik(&self, target: [f64; 2]) -> Option<[f64; 2]> {
        let d2 = target[0] * target[0] + target[1] * target[1];
        let cos_elbow = (d2 - self.l1 * self.l1 - self.l2 * self.l2) / (2.0 * self.l1 * self.l2);
        if !(-1.0..=1.0).contains(&cos_elbow) {
            return None;
        }
        let elbow = cos_elbow.acos();
        let theta1 = target[1].atan2(target[0]) - (self.l2 * elbow.sin()).atan2(self.l1 + self.l2 * elbow.cos());
        Some([theta1, theta1 + elbow])
    }

    fn obstacle(&self, j: usize) -> Result<&Obstacle, DynamicsError> {
        self.obstacles.get(j).ok_or(DynamicsError::UnknownConstraint(j))
    }
}

impl AffineSystem for TwoLinkArm {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        vec![x[1], 0.0, x[3], 0.0]
    }

    fn actuation(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    }

    fn control_bounds(&self) -> &[[f64; 2]] {
        &self.control_bounds
    }

    fn num_constraints(&self) -> usize {
        self.obstacles.len()
    }

    fn barrier(&self, j: usize, x: &[f64]) -> Result<f64, DynamicsError> {
        let [ex, ey] = self.fk(x[0], x[2]);
        Ok(self.obstacle(j)?.barrier(ex, ey))
    }

    fn lie_derivatives(&self, j: usize, x: &[f64]) -> Result<LieTerms, DynamicsError> {
        let obs = self.obstacle(j)?;
        let (l1, l2) = (self.l1, self.l2);
        let (s1, c1) = x[0].sin_cos();
        let (s2, c2) = x[2].sin_cos();
        let (w1, w2) = (x[1], x[3]);
        let [ex, ey] = self.fk(x[0], x[2]);
        let (dx, dy) = (ex - obs.center[0], ey - obs.center[1]);
        // End-effector velocity and drift acceleration.
        let vx = -l1 * s1 * w1 - l2 * s2 * w2;
        let vy = l1 * c1 * w1 + l2 * c2 * w2;
        let ax = -l1 * c1 * w1 * w1 - l2 * c2 * w2 * w2;
        let ay = -l1 * s1 * w1 * w1 - l2 * s2 * w2 * w2;
        Ok(LieTerms {
            b: obs.barrier(ex, ey),
            lf_b: 2.0 * (dx * vx + dy * vy),
            lf2_b: 2.0 * (vx * vx + vy * vy + dx * ax + dy * ay),
            lglf_b: vec![2.0 * l1 * (-dx * s1 + dy * c1), 2.0 * l2 * (-dx * s2 + dy * c2)],
        })
    }
}

/// Explicit Euler step `x' = x + dt (f(x) + g(x) u)`. Controls outside the
/// bounds are clamped.
pub fn step(sys: &dyn AffineSystem, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::BadTimeStep(dt));
    }
    if x.len() != sys.state_dim() {
        return Err(DynamicsError::Dimension {
            what: "state",
            expected: sys.state_dim(),
            got: x.len(),
        });
    }
    if u.len() != sys.control_dim() {
        return Err(DynamicsError::Dimension {
            what: "control",
            expected: sys.control_dim(),
            got: u.len(),
        });
    }
    let clamped = sys.clamp_control(u);
    let excess = u.iter().zip(&clamped).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if excess > 1e-6 {
        warn!("control {u:?} outside bounds, clamped to {clamped:?}");
    }
    let dx = sys.vector_field(x, &clamped);
    let next: Vec<f64> = x.iter().zip(&dx).map(|(xi, di)| xi + dt * di).collect();
    if !next.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::NonFiniteState);
    }
    Ok(next)
}
