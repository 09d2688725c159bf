use serde::{Deserialize, Serialize};

use super::{Gradients, NnError, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn for_params(params: &[&Tensor], lr: f64) -> Self {
        let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
        Self::new(&sizes, lr)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.m.iter().map(|m| m.len()).collect()
    }

    /// One update of every parameter in `params` (same order as the moment
    /// buffers and `grads.slots`).
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &Gradients) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.slots.len() != self.m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.slots.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads.slots).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(NnError::ShapeMismatch(format!("parameter {i} changed shape")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.into_iter().zip(&grads.slots).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p.data[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
