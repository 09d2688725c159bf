use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::affine_into;
use super::{NnError, NodeId, Tape, Tensor};

/// Fully connected network with ReLU on hidden layers and identity output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Tape nodes for a bound [`Mlp`], one `(weight, bias)` pair per layer.
#[derive(Debug, Clone)]
pub struct MlpNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            weights.push(Tensor { shape: [fan_out, fan_in], data: w });
            biases.push(Tensor::vector(b));
        }
        Self {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let weights = dims.windows(2).map(|p| Tensor::zeros(p[1], p[0])).collect();
        let biases = dims.windows(2).map(|p| Tensor::zeros(p[1], 1)).collect();
        Self {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    /// Rebuilds a network from explicit per-layer tensors, checking shapes.
    pub fn from_parts(dims: Vec<usize>, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self, NnError> {
        let net = Self { dims, weights, biases };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let layers = self.dims.len().saturating_sub(1);
        if layers == 0 || self.weights.len() != layers || self.biases.len() != layers {
            return Err(NnError::ShapeMismatch("layer count does not match dims".into()));
        }
        for (l, pair) in self.dims.windows(2).enumerate() {
            let (w, b) = (&self.weights[l], &self.biases[l]);
            if w.shape != [pair[1], pair[0]] || w.data.len() != pair[0] * pair[1] || b.data.len() != pair[1] {
                return Err(NnError::ShapeMismatch(format!("layer {l} has inconsistent shapes")));
            }
            if !w.data.iter().chain(&b.data).all(|v| v.is_finite()) {
                return Err(NnError::ShapeMismatch(format!("layer {l} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Parameter tensors in binding order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weights[l], &mut self.biases[l])
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> MlpNodes {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (tape.param(w), tape.param(b)))
            .collect();
        MlpNodes { layers }
    }

    pub fn forward_bound(&self, nodes: &MlpNodes, tape: &mut Tape<'_>, input: NodeId) -> Result<NodeId, NnError> {
        if tape.value(input).len() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} entries, network expects {}",
                tape.value(input).len(),
                self.input_dim()
            )));
        }
        let last = nodes.layers.len() - 1;
        let mut h = input;
        for (l, (w, b)) in nodes.layers.iter().enumerate() {
            h = tape.affine(*w, *b, h)?;
            if l < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Binds the parameters and records a forward pass.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, input: NodeId) -> Result<NodeId, NnError> {
        let nodes = self.bind(tape);
        self.forward_bound(&nodes, tape, input)
    }

    /// Tape-free forward; bit-identical to the taped pass.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut h = input.to_vec();
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            affine_into(&w.data, &b.data, &h, &mut out);
            if l < last {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut h, &mut out);
        }
        Ok(h)
    }
}
