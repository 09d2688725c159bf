//! Learning substrate: a reverse-mode tape over dense `f64` vectors, ReLU
//! multilayer perceptrons, MSE loss and Adam.

mod adam;
mod mlp;
mod tape;

pub use adam::AdamState;
pub use mlp::{Mlp, MlpNodes};
pub use tape::{Gradients, NodeId, Tape, VjpFn};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Dense row-major matrix; vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: [data.len(), 1],
            data,
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Mean of squared componentwise differences.
pub fn mse_loss(pred: &[f64], label: &[f64]) -> Result<f64, NnError> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(NnError::ShapeMismatch(format!(
            "prediction has {} entries, label {}",
            pred.len(),
            label.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(label)
        .map(|(p, l)| (p - l) * (p - l))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exponential normalization; entries are nonnegative and sum to one.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}
