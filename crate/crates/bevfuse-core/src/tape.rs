//! Reverse-mode differentiation tape.
//!
//! Operations append nodes to a [`Tape`]; each node stores its forward value
//! and a boxed backward rule. Replaying the rules in reverse record order
//! accumulates gradients into every input exactly once per use. Recording is
//! strictly single-threaded; the op vocabulary is fixed (see [`crate::ops`],
//! [`crate::attention`], [`crate::loss`]) rather than a general graph
//! compiler.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule for one recorded operation.
pub trait TapeOp {
    /// Propagate `out_grad` into the gradients of this op's inputs.
    fn backward(&self, out_grad: &[f64], ctx: &mut BackwardCtx<'_>);
}

struct Node {
    value: Tensor,
    op: Option<Box<dyn TapeOp>>,
}

/// Peak transient workspace used by the attention kernels, in bytes.
///
/// Only allocations made inside a kernel call count; inputs and outputs do
/// not. The materialized kernel's workspace grows with the depth-bin count,
/// the factored kernel's does not — the `bench` command reads these.
#[derive(Debug, Clone, Copy, Default)]
pub struct KernelStats {
    pub factored_workspace_bytes: usize,
    pub naive_workspace_bytes: usize,
}

/// Ordered record of executed operations plus gradient buffers.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    pub stats: KernelStats,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), stats: KernelStats::default() }
    }

    /// Record an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub(crate) fn push_op(&mut self, value: Tensor, op: Box<dyn TapeOp>) -> Var {
        self.push(value, Some(op))
    }

    fn push(&mut self, value: Tensor, op: Option<Box<dyn TapeOp>>) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Run the backward pass from a scalar root, seeding d(root)/d(root) = 1.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);
        let Tape { nodes, grads, .. } = self;
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(op) = nodes[i].op.as_ref() else { continue };
            let out_grad = grads[i].take().expect("grad present");
            {
                let mut ctx = BackwardCtx { node_idx: i, nodes, grads };
                op.backward(&out_grad, &mut ctx);
            }
            grads[i] = Some(out_grad);
        }
    }

    /// Gradient of the last backward root w.r.t. `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like `v`'s value (zeros if none flowed).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape.clone();
        match self.grads[v.0].as_ref() {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }
}

/// View given to backward rules: read any node's value, accumulate into any
/// node's gradient.
pub struct BackwardCtx<'a> {
    node_idx: usize,
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> BackwardCtx<'a> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Forward value of the node whose backward rule is running.
    pub fn out_value(&self) -> &Tensor {
        &self.nodes[self.node_idx].value
    }

    /// Mutable gradient buffer for `v`, allocated as zeros on first touch.
    pub fn grad_mut(&mut self, v: Var) -> &mut [f64] {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}
