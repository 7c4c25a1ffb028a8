//! Reverse-mode autodiff on an append-only tape.
//!
//! Every operation evaluates eagerly, validates finiteness, and records
//! `(op, parents, value)`. Backward passes build their vector-Jacobian
//! products *as new tape operations*, so a gradient is itself a
//! differentiable node and second-order quantities (gradients of functions
//! of gradients, Hessian-vector products) fall out of running backward
//! again. This is what the saliency regularizers rely on: they are losses
//! built on top of input-gradients of other losses.
//!
//! Detachment is explicit: [`TapeBase::sign_detached`],
//! [`TapeBase::step_detached`] and [`TapeBase::row_max_detached`] compute
//! values that participate in forward replay but propagate no gradient.
//! They appear as the derivative masks of `abs`/`relu` and as the
//! numerically stabilizing shift of log-softmax, where the true Jacobian
//! contribution is zero or deliberately treated as constant.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layout::IndexMap;
use crate::scalar::Real;
use crate::tensor::TensorBase;

/// Handle to a node on a [`TapeBase`]. Only valid for the tape that issued
/// it, and only while that node has not been truncated away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tape operation. Unary and binary ops take their operands from the node's
/// parent list.
#[derive(Debug, Clone)]
pub enum Op<F> {
    /// Input or constant; carries no recomputation rule.
    Leaf,
    Neg,
    Abs,
    Relu,
    Exp,
    Log,
    Sqrt,
    AddScalar(F),
    MulScalar(F),
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    /// Sum of all elements to a rank-0 scalar.
    Sum,
    Gather(Arc<IndexMap>),
    ScatterAdd(Arc<IndexMap>),
    /// Elementwise sign, treated as constant by backward.
    SignDetached,
    /// Strict-positivity indicator, treated as constant by backward.
    StepDetached,
    /// Per-row max broadcast to input shape, treated as constant by backward.
    RowMaxDetached,
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Neg => "neg",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Sum => "sum",
            Op::Gather(_) => "gather",
            Op::ScatterAdd(_) => "scatter_add",
            Op::SignDetached => "sign_detached",
            Op::StepDetached => "step_detached",
            Op::RowMaxDetached => "row_max_detached",
        }
    }
}

struct NodeRecord<F> {
    op: Op<F>,
    parents: Vec<NodeId>,
    value: TensorBase<F>,
}

/// Append-only autodiff tape.
pub struct TapeBase<F> {
    nodes: Vec<NodeRecord<F>>,
}

fn eval_op<F: Real>(op: &Op<F>, parents: &[&TensorBase<F>]) -> Result<TensorBase<F>> {
    match op {
        Op::Leaf => Err(Error::invalid("tape::eval", "leaf has no recomputation rule")),
        Op::Neg => parents[0].neg(),
        Op::Abs => parents[0].abs(),
        Op::Relu => parents[0].relu(),
        Op::Exp => parents[0].exp(),
        Op::Log => parents[0].ln(),
        Op::Sqrt => parents[0].sqrt(),
        Op::AddScalar(c) => parents[0].add_scalar(*c),
        Op::MulScalar(c) => parents[0].mul_scalar(*c),
        Op::Add => parents[0].add(parents[1]),
        Op::Sub => parents[0].sub(parents[1]),
        Op::Mul => parents[0].mul(parents[1]),
        Op::Div => parents[0].div(parents[1]),
        Op::MatMul => parents[0].matmul(parents[1]),
        Op::Transpose => parents[0].transpose(),
        Op::Reshape(shape) => parents[0].reshape(shape.clone()),
        Op::Sum => Ok(parents[0].sum_all()),
        Op::Gather(map) => parents[0].gather(map),
        Op::ScatterAdd(map) => parents[0].scatter_add(map),
        Op::SignDetached => parents[0].sign(),
        Op::StepDetached => parents[0].step(),
        Op::RowMaxDetached => parents[0].row_max_broadcast(),
    }
}

impl<F: Real> Default for TapeBase<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> TapeBase<F> {
    pub fn new() -> Self {
        TapeBase { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current tape length, for later [`truncate_to`](Self::truncate_to).
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node appended after `mark` was taken. Handles to dropped
    /// nodes become invalid; surviving nodes never reference dropped ones
    /// because parents always precede children.
    pub fn truncate_to(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Value of a node. Panics on a stale or foreign handle; those are
    /// programming errors, not data errors.
    pub fn value(&self, id: NodeId) -> &TensorBase<F> {
        &self
            .nodes
            .get(id.0)
            .unwrap_or_else(|| panic!("stale or foreign node handle {}", id.0))
            .value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn check(&self, id: NodeId, op: &str) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(op, format!("node handle {} out of range", id.0)))
        }
    }

    /// Inserts an input or constant.
    pub fn leaf(&mut self, value: TensorBase<F>) -> Result<NodeId> {
        value.assert_finite("tape::leaf")?;
        self.nodes.push(NodeRecord {
            op: Op::Leaf,
            parents: vec![],
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Inserts a rank-0 constant.
    pub fn scalar(&mut self, value: F) -> Result<NodeId> {
        self.leaf(TensorBase::scalar_value(value))
    }

    fn push(&mut self, op: Op<F>, parents: Vec<NodeId>) -> Result<NodeId> {
        for &p in &parents {
            self.check(p, op.name())?;
        }
        let parent_values: Vec<&TensorBase<F>> =
            parents.iter().map(|&p| &self.nodes[p.0].value).collect();
        let value = eval_op(&op, &parent_values)?;
        value.assert_finite(op.name())?;
        self.nodes.push(NodeRecord { op, parents, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Neg, vec![x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Abs, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, vec![x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Log, vec![x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt, vec![x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        self.push(Op::AddScalar(c), vec![x])
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        self.push(Op::MulScalar(c), vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div, vec![a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Reshape(shape), vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x])
    }

    pub fn gather(&mut self, x: NodeId, map: Arc<IndexMap>) -> Result<NodeId> {
        self.push(Op::Gather(map), vec![x])
    }

    pub fn scatter_add(&mut self, x: NodeId, map: Arc<IndexMap>) -> Result<NodeId> {
        self.push(Op::ScatterAdd(map), vec![x])
    }

    pub fn sign_detached(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SignDetached, vec![x])
    }

    pub fn step_detached(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::StepDetached, vec![x])
    }

    pub fn row_max_detached(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::RowMaxDetached, vec![x])
    }

    /// Mean of all elements, as a rank-0 node.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.mul_scalar(s, F::one() / F::from_count(n))
    }

    /// Whether `node`'s value depends on `ancestor` through the recorded
    /// graph (detached ops count as dependencies for replay but still appear
    /// here; gradient flow is a separate question).
    pub fn depends_on(&self, node: NodeId, ancestor: NodeId) -> bool {
        if node.0 < ancestor.0 {
            return false;
        }
        let mut visited = vec![false; node.0 + 1];
        let mut stack = vec![node.0];
        while let Some(id) = stack.pop() {
            if id == ancestor.0 {
                return true;
            }
            if visited[id] {
                continue;
            }
            visited[id] = true;
            for p in &self.nodes[id].parents {
                if p.0 >= ancestor.0 {
                    stack.push(p.0);
                }
            }
        }
        false
    }

    /// Vector-Jacobian product contributions of one node: for each parent,
    /// a new node holding `upstream * d(node)/d(parent)`.
    fn vjp(&mut self, id: usize, upstream: NodeId) -> Result<Vec<(usize, NodeId)>> {
        let op = self.nodes[id].op.clone();
        let parents = self.nodes[id].parents.clone();
        let this = NodeId(id);
        let out = match op {
            Op::Leaf | Op::SignDetached | Op::StepDetached | Op::RowMaxDetached => vec![],
            Op::Neg => {
                let g = self.neg(upstream)?;
                vec![(parents[0].0, g)]
            }
            Op::Abs => {
                let mask = self.sign_detached(parents[0])?;
                let g = self.mul(upstream, mask)?;
                vec![(parents[0].0, g)]
            }
            Op::Relu => {
                let mask = self.step_detached(parents[0])?;
                let g = self.mul(upstream, mask)?;
                vec![(parents[0].0, g)]
            }
            Op::Exp => {
                let g = self.mul(upstream, this)?;
                vec![(parents[0].0, g)]
            }
            Op::Log => {
                let g = self.div(upstream, parents[0])?;
                vec![(parents[0].0, g)]
            }
            Op::Sqrt => {
                let half = F::from_f64_lit(0.5);
                let ratio = self.div(upstream, this)?;
                let g = self.mul_scalar(ratio, half)?;
                vec![(parents[0].0, g)]
            }
            Op::AddScalar(_) => vec![(parents[0].0, upstream)],
            Op::MulScalar(c) => {
                let g = self.mul_scalar(upstream, c)?;
                vec![(parents[0].0, g)]
            }
            Op::Add => vec![(parents[0].0, upstream), (parents[1].0, upstream)],
            Op::Sub => {
                let gb = self.neg(upstream)?;
                vec![(parents[0].0, upstream), (parents[1].0, gb)]
            }
            Op::Mul => {
                let ga = self.mul(upstream, parents[1])?;
                let gb = self.mul(upstream, parents[0])?;
                vec![(parents[0].0, ga), (parents[1].0, gb)]
            }
            Op::Div => {
                let ga = self.div(upstream, parents[1])?;
                let scaled = self.mul(ga, this)?;
                let gb = self.neg(scaled)?;
                vec![(parents[0].0, ga), (parents[1].0, gb)]
            }
            Op::MatMul => {
                let bt = self.transpose(parents[1])?;
                let ga = self.matmul(upstream, bt)?;
                let at = self.transpose(parents[0])?;
                let gb = self.matmul(at, upstream)?;
                vec![(parents[0].0, ga), (parents[1].0, gb)]
            }
            Op::Transpose => {
                let g = self.transpose(upstream)?;
                vec![(parents[0].0, g)]
            }
            Op::Reshape(_) => {
                let src_shape = self.value(parents[0]).shape().to_vec();
                let g = self.reshape(upstream, src_shape)?;
                vec![(parents[0].0, g)]
            }
            Op::Sum => {
                let src_shape = self.value(parents[0]).shape().to_vec();
                let map = IndexMap::broadcast_scalar(vec![], src_shape)?;
                let g = self.gather(upstream, Arc::new(map))?;
                vec![(parents[0].0, g)]
            }
            Op::Gather(map) => {
                let g = self.scatter_add(upstream, map)?;
                vec![(parents[0].0, g)]
            }
            Op::ScatterAdd(map) => {
                let g = self.gather(upstream, map)?;
                vec![(parents[0].0, g)]
            }
        };
        Ok(out)
    }

    /// Reverse pass from a scalar `output`. Returns the adjoint node of every
    /// node id at or below `output` that received one.
    fn backward(&mut self, output: NodeId) -> Result<HashMap<usize, NodeId>> {
        self.check(output, "gradient")?;
        if self.value(output).numel() != 1 {
            return Err(Error::invalid(
                "gradient",
                format!(
                    "output must be a one-element tensor, got {}",
                    crate::tensor::fmt_shape(self.value(output).shape())
                ),
            ));
        }
        let seed_shape = self.value(output).shape().to_vec();
        let seed = self.leaf(TensorBase::ones(seed_shape))?;
        let mut adjoints: HashMap<usize, NodeId> = HashMap::new();
        adjoints.insert(output.0, seed);
        for id in (0..=output.0).rev() {
            let Some(&up) = adjoints.get(&id) else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            for (parent, contrib) in self.vjp(id, up)? {
                let merged = match adjoints.get(&parent) {
                    Some(&prev) => self.add(prev, contrib)?,
                    None => contrib,
                };
                adjoints.insert(parent, merged);
            }
        }
        Ok(adjoints)
    }

    /// Gradients of a scalar `output` with respect to `wrt`, as live tape
    /// nodes that can themselves be differentiated (gradients of gradients).
    /// Nodes the output does not depend on get a zero node of their shape.
    pub fn gradient_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        for &w in wrt {
            self.check(w, "gradient")?;
        }
        let adjoints = self.backward(output)?;
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoints.get(&w.0) {
                Some(&g) => out.push(g),
                None => {
                    let shape = self.value(w).shape().to_vec();
                    out.push(self.leaf(TensorBase::zeros(shape))?);
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar `output` with respect to `wrt`, as plain
    /// tensors. The nodes created by the backward pass are dropped before
    /// returning, so the tape is exactly as long as before the call.
    pub fn gradient_values(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<TensorBase<F>>> {
        let mark = self.mark();
        let result = self.gradient_nodes(output, wrt);
        let values = match result {
            Ok(nodes) => Ok(nodes.iter().map(|&n| self.value(n).clone()).collect()),
            Err(e) => Err(e),
        };
        self.truncate_to(mark);
        values
    }

    /// Recomputes every non-leaf node from its parents and verifies the
    /// stored values are reproduced exactly (IEEE equality). Exercises the
    /// invariant that the tape is a faithful, replayable program.
    pub fn verify_replay(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let parent_values: Vec<&TensorBase<F>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let recomputed = eval_op(&node.op, &parent_values)?;
            if recomputed != node.value {
                return Err(Error::numeric(
                    "tape::replay",
                    format!("node {} ({}) did not reproduce its value", id, node.op.name()),
                ));
            }
        }
        Ok(())
    }
}
