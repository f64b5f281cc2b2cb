//! Tape-based reverse-mode automatic differentiation over a closed op set.
//!
//! A [`Tape`] records every forward operation as a node holding its output
//! value and whatever intermediates its gradient rule needs. Nodes are
//! appended in evaluation order, so inputs always precede their consumers and
//! [`Tape::backward`] can visit each node once in reverse.
//!
//! Every op rejects non-finite outputs: instabilities in long recurrences
//! surface as [`Error::NonFinite`] at the op that produced them.
//!
//! The tape also acts as the activation allocator: it counts the bytes of all
//! recorded outputs and saved intermediates (leaves excluded) and the analytic
//! floating-point work of each op, and can enforce a byte budget.

mod backward;
mod gradcheck;
mod nn;
mod ops;
mod seq;

pub use gradcheck::{grad_check, grad_check_with_floor, GradCheckReport, GRADCHECK_FLOOR};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Mean {
        x: Var,
        axes: Vec<usize>,
    },
    Sum(Var),
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    CausalConv {
        u: Var,
        k: Var,
    },
    SsmDiscretize {
        a: Var,
        b: Var,
        log_dt: Var,
        minv: Vec<T>,
    },
    SsmKernel {
        abar: Var,
        bbar: Var,
        c: Var,
        states: Vec<T>,
    },
    SsmScan {
        abar: Var,
        bbar: Var,
        c: Var,
        u: Var,
        states: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | BatchMatMul(a, b) => vec![*a, *b],
            Scale(x, _) | Reshape(x) | Permute(x, _) | Gelu(x) | Softmax(x) | Sum(x) => vec![*x],
            Narrow { x, .. } | Mean { x, .. } | MaxPool3d { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            CausalConv { u, k } => vec![*u, *k],
            SsmDiscretize { a, b, log_dt, .. } => vec![*a, *b, *log_dt],
            SsmKernel { abar, bbar, c, .. } => vec![*abar, *bbar, *c],
            SsmScan {
                abar, bbar, c, u, ..
            } => vec![*abar, *bbar, *c, *u],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
    pub(crate) flops: u64,
}

/// Counters maintained by the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Bytes of recorded op outputs plus saved intermediates.
    pub activation_bytes: usize,
    /// Largest value `activation_bytes` has reached.
    pub peak_activation_bytes: usize,
    pub forward_flops: u64,
    /// Work of the reverse pass, estimated as twice the forward work of each
    /// node that received a gradient.
    pub backward_flops: u64,
    pub nodes: usize,
}

pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    stats: TapeStats,
    budget: Option<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            stats: TapeStats::default(),
            budget: None,
        }
    }

    /// A tape that refuses to record more than `bytes` of activations.
    pub fn with_budget(bytes: usize) -> Self {
        Tape {
            budget: Some(bytes),
            ..Self::new()
        }
    }

    pub fn stats(&self) -> TapeStats {
        TapeStats {
            nodes: self.nodes.len(),
            ..self.stats
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are only propagated towards leaves
    /// with `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            flops: 0,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// participated in it and requires a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Fails early if recording `bytes` more would exceed the budget.
    pub(crate) fn reserve(&self, bytes: usize) -> Result<()> {
        if let Some(budget) = self.budget {
            let requested = self.stats.activation_bytes + bytes;
            if requested > budget {
                return Err(Error::MemoryBudget { requested, budget });
            }
        }
        Ok(())
    }

    pub(crate) fn push(
        &mut self,
        name: &str,
        value: Tensor<T>,
        op: Op<T>,
        flops: u64,
        saved_bytes: usize,
    ) -> Result<Var> {
        value.check_finite(name)?;
        let bytes = value.bytes() + saved_bytes;
        self.reserve(bytes)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.stats.activation_bytes += bytes;
        self.stats.peak_activation_bytes = self
            .stats
            .peak_activation_bytes
            .max(self.stats.activation_bytes);
        self.stats.forward_flops += flops;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            flops,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a one-element `root`. Each node is visited once, in
    /// reverse recording order; gradients of intermediate nodes are released
    /// once propagated, gradients of leaves are kept.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.shape(root).to_vec();
        self.grads[root.0] = Some(Tensor::ones(root_shape));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.stats.backward_flops += 2 * self.nodes[i].flops;
            let contribs = self.backward_rule(i, &g)?;
            for (v, dg) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                dg.check_finite("backward")?;
                match &mut self.grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(dg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }
}

/// True if `suffix` equals the trailing extents of `shape`.
pub(crate) fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}
