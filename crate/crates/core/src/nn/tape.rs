use std::borrow::Cow;

use super::{sigmoid, softplus, NnError, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Vector-Jacobian product of a custom node: maps the output adjoint to one
/// adjoint per parent.
pub type VjpFn<'p> = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + 'p>;

enum Op<'p> {
    Input,
    Param(usize),
    /// `W x + b`
    Affine { w: NodeId, b: NodeId, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Vector times a scalar node.
    ScaleBy { x: NodeId, s: NodeId },
    AddConst(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Sum(NodeId),
    Mse { pred: NodeId, label: NodeId },
    Custom { parents: Vec<NodeId>, vjp: VjpFn<'p> },
}

struct Node<'p> {
    op: Op<'p>,
    value: Cow<'p, [f64]>,
}

/// Append-only computation record. Node order is topological by
/// construction; [`Tape::backward`] walks it in exact reverse.
///
/// Parameters are borrowed, not copied. Each [`Tape::param`] call takes the
/// next gradient slot, so callers must register parameters in a fixed order.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    n_params: usize,
}

/// Per-parameter gradients in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub slots: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(other: &Gradients) -> Self {
        Self {
            slots: other.slots.iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }

    pub fn from_sizes(sizes: &[usize]) -> Self {
        Self {
            slots: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for s in &mut self.slots {
            for x in s.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `out = W x + b` for a row-major `rows x cols` matrix. Shared by the tape
/// and tape-free evaluation so both give identical bits.
pub(crate) fn affine_into(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let cols = x.len();
    out.clear();
    out.extend(w.chunks_exact(cols).zip(b).map(|(row, bi)| {
        let mut acc = 0.0;
        for (wij, xj) in row.iter().zip(x) {
            acc += wij * xj;
        }
        acc + bi
    }));
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<'p>, value: Cow<'p, [f64]>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check_same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), NnError> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(NnError::ShapeMismatch(format!("{what}: {la} vs {lb}")));
        }
        Ok(())
    }

    /// Constant input (no gradient is reported for it).
    pub fn input(&mut self, data: Vec<f64>) -> NodeId {
        self.push(Op::Input, Cow::Owned(data))
    }

    /// Registers a trainable tensor in the next gradient slot.
    pub fn param(&mut self, t: &'p Tensor) -> NodeId {
        let slot = self.n_params;
        self.n_params += 1;
        self.push(Op::Param(slot), Cow::Borrowed(&t.data))
    }

    /// `W x + b` where `W` is `rows x cols` with `cols = len(x)`.
    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId, NnError> {
        let (wl, bl, xl) = (self.value(w).len(), self.value(b).len(), self.value(x).len());
        if xl == 0 || wl != bl * xl {
            return Err(NnError::ShapeMismatch(format!(
                "affine: weight has {wl} entries, bias {bl}, input {xl}"
            )));
        }
        let mut out = Vec::with_capacity(bl);
        affine_into(self.value(w), self.value(b), self.value(x), &mut out);
        Ok(self.push(Op::Affine { w, b, x }, Cow::Owned(out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check_same_len(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), Cow::Owned(v)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check_same_len(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), Cow::Owned(v)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check_same_len(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), Cow::Owned(v)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), Cow::Owned(v))
    }

    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NnError> {
        if self.value(s).len() != 1 {
            return Err(NnError::ShapeMismatch("scale_by expects a scalar node".into()));
        }
        let k = self.value(s)[0];
        let v = self.value(x).iter().map(|v| v * k).collect();
        Ok(self.push(Op::ScaleBy { x, s }, Cow::Owned(v)))
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).iter().map(|x| x + k).collect();
        self.push(Op::AddConst(a), Cow::Owned(v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), Cow::Owned(v))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| softplus(*x)).collect();
        self.push(Op::Softplus(a), Cow::Owned(v))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = super::softmax(self.value(a));
        self.push(Op::Softmax(a), Cow::Owned(v))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let v: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), Cow::Owned(v))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let n = self.value(x).len();
        if start + len > n {
            return Err(NnError::ShapeMismatch(format!(
                "slice {start}..{} of a {n}-vector",
                start + len
            )));
        }
        let v = self.value(x)[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x, start }, Cow::Owned(v)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = vec![self.value(a).iter().sum()];
        self.push(Op::Sum(a), Cow::Owned(v))
    }

    /// Scalar mean squared error between two equal-length nodes.
    pub fn mse(&mut self, pred: NodeId, label: NodeId) -> Result<NodeId, NnError> {
        let v = super::mse_loss(self.value(pred), self.value(label))?;
        Ok(self.push(Op::Mse { pred, label }, Cow::Owned(vec![v])))
    }

    /// Hook for layers whose Jacobian is supplied externally (the QP layer).
    pub fn custom(&mut self, parents: &[NodeId], value: Vec<f64>, vjp: VjpFn<'p>) -> NodeId {
        self.push(
            Op::Custom {
                parents: parents.to_vec(),
                vjp,
            },
            Cow::Owned(value),
        )
    }

    /// Reverse sweep from a scalar node. Parameters the loss does not reach
    /// get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss node");
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.n_params];

        fn acc(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl Fn(usize) -> f64) {
            let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
            for (i, v) in slot.iter_mut().enumerate() {
                *v += f(i);
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => grads[*slot] = g,
                Op::Affine { w, b, x } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let cols = xv.len();
                    acc(&mut adj, *b, g.len(), |i| g[i]);
                    acc(&mut adj, *w, wv.len(), |k| g[k / cols] * xv[k % cols]);
                    let mut dx = vec![0.0; cols];
                    for (row, gi) in wv.chunks_exact(cols).zip(&g) {
                        for (d, wij) in dx.iter_mut().zip(row) {
                            *d += wij * gi;
                        }
                    }
                    acc(&mut adj, *x, cols, |j| dx[j]);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.len(), |i| g[i]);
                    acc(&mut adj, *b, g.len(), |i| g[i]);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.len(), |i| g[i]);
                    acc(&mut adj, *b, g.len(), |i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, g.len(), |i| g[i] * bv[i]);
                    acc(&mut adj, *b, g.len(), |i| g[i] * av[i]);
                }
                Op::Scale(a, k) => acc(&mut adj, *a, g.len(), |i| g[i] * k),
                Op::ScaleBy { x, s } => {
                    let k = self.value(*s)[0];
                    let xv = self.value(*x);
                    acc(&mut adj, *x, g.len(), |i| g[i] * k);
                    let ds: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    acc(&mut adj, *s, 1, |_| ds);
                }
                Op::AddConst(a) => acc(&mut adj, *a, g.len(), |i| g[i]),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    acc(&mut adj, *a, g.len(), |i| if av[i] > 0.0 { g[i] } else { 0.0 });
                }
                Op::Softplus(a) => {
                    let av = self.value(*a);
                    acc(&mut adj, *a, g.len(), |i| g[i] * sigmoid(av[i]));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot: f64 = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                    acc(&mut adj, *a, g.len(), |i| y[i] * (g[i] - dot));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        acc(&mut adj, *p, n, |i| g[off + i]);
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = self.value(*x).len();
                    let (s, len) = (*start, g.len());
                    acc(&mut adj, *x, n, |i| if i >= s && i < s + len { g[i - s] } else { 0.0 });
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    acc(&mut adj, *a, n, |_| g[0]);
                }
                Op::Mse { pred, label } => {
                    let (p, l) = (self.value(*pred), self.value(*label));
                    let k = 2.0 * g[0] / p.len() as f64;
                    acc(&mut adj, *pred, p.len(), |i| k * (p[i] - l[i]));
                    acc(&mut adj, *label, l.len(), |i| -k * (p[i] - l[i]));
                }
                Op::Custom { parents, vjp } => {
                    let parent_adj = vjp(&g);
                    for (p, pa) in parents.iter().zip(parent_adj) {
                        acc(&mut adj, *p, pa.len(), |i| pa[i]);
                    }
                }
            }
        }

        for (slot, g) in grads.iter_mut().enumerate() {
            if g.is_empty() {
                let len = self
                    .nodes
                    .iter()
                    .find_map(|n| match n.op {
                        Op::Param(s) if s == slot => Some(n.value.len()),
                        _ => None,
                    })
                    .unwrap_or(0);
                *g = vec![0.0; len];
            }
        }
        Gradients { slots: grads }
    }
}
