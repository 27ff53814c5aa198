//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking the tape backwards from
//! a scalar root visits each node after all of its consumers. Only leaves keep
//! their gradient once [`Graph::backward`] returns.
//!
//! A graph is single-threaded; run one graph per sample to parallelize.

mod conv;
mod ops;
mod spatial;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::Conv2dSpec;
pub use spatial::{avg_pool, resize_bilinear};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    DivScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape(Var),
    NormalizeRows { x: Var, eps: f64 },
    Cosine { a: Var, b: Var, eps: f64 },
    Conv2d(conv::ConvNode),
    Concat { inputs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Resize { x: Var },
    AvgPool { x: Var, k: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. a leaf. `None` if the leaf does not
    /// require grad or is unreachable from the root.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Same as [`get`](Self::get), but an unreachable leaf yields zeros.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// First node (in evaluation order) whose value contains NaN or ±inf.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(Var)
    }

    pub fn describe(&self, var: Var) -> String {
        let node = &self.nodes[var.0];
        let kind = format!("{:?}", node.op);
        let kind = kind.split(['(', ' ', '{']).next().unwrap_or("?").to_string();
        format!("node {} ({kind}, shape {:?})", var.0, node.value.shape())
    }

    /// Hash of every branch taken by non-smooth operations (ReLU sign,
    /// clamp saturation, norm floor). Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn nonsmooth_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in self.nodes[x.0].value.data() {
                        ((v < *lo) as u8 + 2 * (v > *hi) as u8).hash(&mut h);
                    }
                }
                Op::NormalizeRows { x, eps } => {
                    let shape = self.nodes[x.0].value.shape();
                    let c = shape[shape.len() - 1];
                    for row in self.nodes[x.0].value.data().chunks(c) {
                        (row.iter().map(|v| v * v).sum::<f64>().sqrt() > *eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::shape(
                "backward",
                "root",
                format!("expected a scalar loss, got shape {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            self.backward_node(i, &g, &mut sink);
        }
        Ok(Gradients { grads: leaves })
    }

    fn backward_node(&self, i: usize, g: &[f64], sink: &mut GradSink<'_>) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink.add(*a, |ga| axpy(ga, g, 1.0));
                sink.add(*b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                sink.add(*a, |ga| axpy(ga, g, 1.0));
                sink.add(*b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                sink.add(*a, |ga| {
                    for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                sink.add(*b, |gb| {
                    for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                sink.add(*a, |ga| {
                    for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi / bi;
                    }
                });
                sink.add(*b, |gb| {
                    for (((d, &gi), &bi), &yi) in gb.iter_mut().zip(g).zip(bv).zip(out) {
                        *d -= gi * yi / bi;
                    }
                });
            }
            Op::Affine(x, scale) => sink.add(*x, |gx| axpy(gx, g, *scale)),
            Op::DivScalar(x, s) => {
                let sv = self.value(*s).item();
                sink.add(*x, |gx| axpy(gx, g, 1.0 / sv));
                let dot: f64 = g.iter().zip(out).map(|(gi, yi)| gi * yi).sum();
                sink.add(*s, |gs| gs[0] -= dot / sv);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                sink.add(*x, |gx| {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => sink.add(*x, |gx| {
                for ((d, &gi), &s) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * s * (1.0 - s);
                }
            }),
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                sink.add(*x, |gx| {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gi / xi;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                sink.add(*x, |gx| {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi >= *lo && xi <= *hi {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sum(x) => sink.add(*x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Reshape(x) => sink.add(*x, |gx| axpy(gx, g, 1.0)),
            Op::MatMul { a, b, m, k, n } => ops::backward_matmul(self, *a, *b, *m, *k, *n, g, sink),
            Op::Transpose { x, rows, cols } => sink.add(*x, |gx| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            Op::NormalizeRows { x, eps } => ops::backward_normalize_rows(self, *x, *eps, out, g, sink),
            Op::Cosine { a, b, eps } => ops::backward_cosine(self, *a, *b, *eps, g, sink),
            Op::Conv2d(c) => conv::backward(self, c, g, sink),
            Op::Concat { inputs } => spatial::backward_concat(self, inputs, g, sink),
            Op::SliceChannels { x, start } => spatial::backward_slice(self, *x, *start, node.value.shape(), g, sink),
            Op::Resize { x } => spatial::backward_resize(self, *x, node.value.shape(), g, sink),
            Op::AvgPool { x, k } => spatial::backward_avg_pool(self, *x, *k, g, sink),
        }
    }
}

/// Write access to pending gradients of not-yet-visited nodes.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub fn add(&mut self, var: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        let slot = self.grads[var.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
