//! Reverse-mode automatic differentiation over dense vector operations.
//!
//! A [`CompGraph`] is an append-only list of nodes; every operation refers to
//! nodes already in the list, so the graph is acyclic by construction and a
//! single forward sweep in index order evaluates it. The reverse sweep
//! propagates adjoints from the scalar output back to the named leaf slots.
//!
//! Supported primitives: elementwise `add`/`sub`/`mul`/`div`, `dot`, scaling
//! a vector by a scalar node, Euclidean `norm`, elementwise `relu`/`exp`/
//! `log`/`sqrt`, a batched affine map `y_c = W v_c + bias` applied to
//! each column of the right-hand operand (weight sharing across columns is
//! what makes per-coordinate learned update rules cheap to express), plus
//! the layout plumbing around it: `slice` carves a contiguous range out of
//! a flat vector and `interleave` packs per-coordinate channels into the
//! column-major form `affine` consumes.
//!
//! Conventions that matter for callers:
//!
//! * The ReLU derivative at exactly zero is taken to be zero.
//! * The norm gradient at the zero vector is taken to be zero.
//! * Graphs are immutable once built; evaluation allocates its own scratch,
//!   so a graph can be shared across threads.
//! * Evaluation is bit-deterministic: the same bindings produce the same
//!   bits, because the sweep order is fixed and no reductions are reordered.
//!
//! Only first-order gradients of a scalar output are supported. Training
//! code that wants a derivative "through one algorithm step" must build the
//! step into a single graph; there is no machinery for differentiating
//! through repeated application.

use thiserror::Error;

/// Handle to a node in a [`CompGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Index of the node inside its graph, for diagnostics.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { slot: usize },
    Const { values: Vec<f64> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Dot(NodeId, NodeId),
    /// `scalar * vector`; first operand must have length 1.
    Scale(NodeId, NodeId),
    Norm(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    /// `y_c = W v_c (+ bias)` for each of `cols` columns packed contiguously.
    Affine {
        w: NodeId,
        x: NodeId,
        bias: Option<NodeId>,
        rows: usize,
        inn: usize,
        cols: usize,
    },
    /// Contiguous sub-range `x[start .. start + len]`.
    Slice {
        x: NodeId,
        start: usize,
    },
    /// Pack equal-length vectors as the rows of a column-major matrix:
    /// with `k` operands of length `n`, output index `c * k + j` holds
    /// element `c` of operand `j`. The result feeds [`Op::Affine`] as `n`
    /// columns of height `k`.
    Interleave(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const { .. } => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Dot(..) => "dot",
            Op::Scale(..) => "scale",
            Op::Norm(..) => "norm",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Affine { .. } => "affine",
            Op::Slice { .. } => "slice",
            Op::Interleave(..) => "interleave",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    len: usize,
}

#[derive(Debug, Clone)]
struct LeafSpec {
    name: String,
    len: usize,
}

/// Errors from graph construction or evaluation.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in `{op}`: {details}")]
    Shape { op: &'static str, details: String },
    #[error("output must be a scalar node, node {node} has length {len}")]
    OutputNotScalar { node: usize, len: usize },
    #[error("no output node set")]
    NoOutput,
    #[error("expected {expected} leaf bindings, got {got}")]
    BindingCount { expected: usize, got: usize },
    #[error("leaf `{name}` (slot {slot}) expects length {expected}, binding has length {got}")]
    BindingShape {
        name: String,
        slot: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by node {node} (`{op}`)")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite adjoint produced at node {node} (`{op}`)")]
    NonFiniteAdjoint { node: usize, op: &'static str },
}

/// Value and per-leaf gradient of a graph's scalar output.
#[derive(Debug, Clone)]
pub struct GradResult {
    /// Output value.
    pub value: f64,
    /// Gradients in leaf declaration order; `grads[slot].len()` equals the
    /// declared length of that leaf.
    pub grads: Vec<Vec<f64>>,
}

/// A computation graph with named leaf slots and one scalar output.
#[derive(Debug, Clone, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
    leaves: Vec<LeafSpec>,
    output: Option<NodeId>,
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes currently in the graph.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of declared leaf slots.
    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Vector length of a node.
    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.0].len
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        self.nodes.push(Node { op, len });
        NodeId(self.nodes.len() - 1)
    }

    /// Declare a named leaf of the given length. Bindings are supplied at
    /// evaluation time in declaration order.
    pub fn leaf(&mut self, name: &str, len: usize) -> NodeId {
        let slot = self.leaves.len();
        self.leaves.push(LeafSpec {
            name: name.to_string(),
            len,
        });
        self.push(Op::Leaf { slot }, len)
    }

    /// Embed a constant vector.
    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        let len = values.len();
        self.push(Op::Const { values }, len)
    }

    /// Embed a constant scalar.
    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(vec![value])
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        make: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        let (la, lb) = (self.nodes[a.0].len, self.nodes[b.0].len);
        if la != lb {
            return Err(GraphError::Shape {
                op: op_name,
                details: format!("operand lengths {la} vs {lb}"),
            });
        }
        Ok(self.push(make(a, b), la))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise("add", a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise("sub", a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise("mul", a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise("div", a, b, Op::Div)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (la, lb) = (self.nodes[a.0].len, self.nodes[b.0].len);
        if la != lb {
            return Err(GraphError::Shape {
                op: "dot",
                details: format!("operand lengths {la} vs {lb}"),
            });
        }
        Ok(self.push(Op::Dot(a, b), 1))
    }

    /// `scalar * vector`. The first operand must be a length-1 node.
    pub fn scale(&mut self, scalar: NodeId, vector: NodeId) -> Result<NodeId, GraphError> {
        if self.nodes[scalar.0].len != 1 {
            return Err(GraphError::Shape {
                op: "scale",
                details: format!("scalar operand has length {}", self.nodes[scalar.0].len),
            });
        }
        let len = self.nodes[vector.0].len;
        Ok(self.push(Op::Scale(scalar, vector), len))
    }

    /// Convenience: multiply a node by a compile-time constant.
    pub fn scale_by(&mut self, factor: f64, vector: NodeId) -> Result<NodeId, GraphError> {
        let c = self.scalar(factor);
        self.scale(c, vector)
    }

    /// Euclidean norm; gradient at the zero vector is zero.
    pub fn norm(&mut self, v: NodeId) -> NodeId {
        self.push(Op::Norm(v), 1)
    }

    /// Elementwise `max(0, x)`; derivative at zero is zero.
    pub fn relu(&mut self, v: NodeId) -> NodeId {
        let len = self.nodes[v.0].len;
        self.push(Op::Relu(v), len)
    }

    pub fn exp(&mut self, v: NodeId) -> NodeId {
        let len = self.nodes[v.0].len;
        self.push(Op::Exp(v), len)
    }

    pub fn log(&mut self, v: NodeId) -> NodeId {
        let len = self.nodes[v.0].len;
        self.push(Op::Log(v), len)
    }

    pub fn sqrt(&mut self, v: NodeId) -> NodeId {
        let len = self.nodes[v.0].len;
        self.push(Op::Sqrt(v), len)
    }

    /// Batched affine map. `w` holds a row-major `rows x inn` matrix, `x`
    /// holds `cols` column vectors of length `inn` packed back to back, and
    /// the result packs `cols` vectors of length `rows` the same way. The
    /// optional bias (length `rows`) is added to every column. With
    /// `cols > 1` this is a 1x1-convolution-style shared-weight map.
    pub fn affine(
        &mut self,
        w: NodeId,
        x: NodeId,
        bias: Option<NodeId>,
        rows: usize,
        inn: usize,
    ) -> Result<NodeId, GraphError> {
        let lw = self.nodes[w.0].len;
        if lw != rows * inn {
            return Err(GraphError::Shape {
                op: "affine",
                details: format!("weight length {lw}, expected {rows}x{inn}={}", rows * inn),
            });
        }
        let lx = self.nodes[x.0].len;
        if inn == 0 || lx % inn != 0 {
            return Err(GraphError::Shape {
                op: "affine",
                details: format!("input length {lx} not a multiple of {inn}"),
            });
        }
        let cols = lx / inn;
        if let Some(b) = bias {
            let lb = self.nodes[b.0].len;
            if lb != rows {
                return Err(GraphError::Shape {
                    op: "affine",
                    details: format!("bias length {lb}, expected {rows}"),
                });
            }
        }
        Ok(self.push(
            Op::Affine {
                w,
                x,
                bias,
                rows,
                inn,
                cols,
            },
            rows * cols,
        ))
    }

    /// Contiguous sub-vector `x[start .. start + len]`. Useful for carving
    /// independently-shaped pieces (weight matrices, biases) out of one flat
    /// parameter vector inside a graph.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let lx = self.nodes[x.0].len;
        if start + len > lx {
            return Err(GraphError::Shape {
                op: "slice",
                details: format!("range {start}..{} out of bounds for length {lx}", start + len),
            });
        }
        Ok(self.push(Op::Slice { x, start }, len))
    }

    /// Interleave equal-length vectors into the column-major layout that
    /// [`CompGraph::affine`] consumes: with `k` operands of length `n`, the
    /// result holds `n` columns of height `k`, column `c` being
    /// `(v_0[c], v_1[c], ..., v_{k-1}[c])`. This is how per-coordinate
    /// feature channels become the input of a shared-weight map.
    pub fn interleave(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        let Some(first) = parts.first() else {
            return Err(GraphError::Shape {
                op: "interleave",
                details: "no operands".to_string(),
            });
        };
        let n = self.nodes[first.0].len;
        for p in parts {
            let lp = self.nodes[p.0].len;
            if lp != n {
                return Err(GraphError::Shape {
                    op: "interleave",
                    details: format!("operand lengths {n} vs {lp}"),
                });
            }
        }
        Ok(self.push(Op::Interleave(parts.to_vec()), n * parts.len()))
    }

    /// Mark the scalar output node. Must be called before evaluation.
    pub fn set_output(&mut self, id: NodeId) -> Result<(), GraphError> {
        let len = self.nodes[id.0].len;
        if len != 1 {
            return Err(GraphError::OutputNotScalar { node: id.0, len });
        }
        self.output = Some(id);
        Ok(())
    }

    fn check_bindings(&self, binds: &[&[f64]]) -> Result<(), GraphError> {
        if binds.len() != self.leaves.len() {
            return Err(GraphError::BindingCount {
                expected: self.leaves.len(),
                got: binds.len(),
            });
        }
        for (slot, (spec, b)) in self.leaves.iter().zip(binds).enumerate() {
            if b.len() != spec.len {
                return Err(GraphError::BindingShape {
                    name: spec.name.clone(),
                    slot,
                    expected: spec.len,
                    got: b.len(),
                });
            }
        }
        Ok(())
    }

    fn forward(&self, binds: &[&[f64]]) -> Result<Vec<Vec<f64>>, GraphError> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf { slot } => binds[*slot].to_vec(),
                Op::Const { values } => values.clone(),
                Op::Add(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x + y),
                Op::Sub(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x - y),
                Op::Mul(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x * y),
                Op::Div(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x / y),
                Op::Dot(a, b) => vec![crate::vecmath::dot(&vals[a.0], &vals[b.0])],
                Op::Scale(s, v) => {
                    let c = vals[s.0][0];
                    vals[v.0].iter().map(|x| c * x).collect()
                }
                Op::Norm(v) => vec![crate::vecmath::norm(&vals[v.0])],
                Op::Relu(v) => vals[v.0].iter().map(|x| x.max(0.0)).collect(),
                Op::Exp(v) => vals[v.0].iter().map(|x| x.exp()).collect(),
                Op::Log(v) => vals[v.0].iter().map(|x| x.ln()).collect(),
                Op::Sqrt(v) => vals[v.0].iter().map(|x| x.sqrt()).collect(),
                Op::Affine {
                    w,
                    x,
                    bias,
                    rows,
                    inn,
                    cols,
                } => {
                    let wv = &vals[w.0];
                    let xv = &vals[x.0];
                    let bv = bias.map(|b| &vals[b.0]);
                    let mut y = vec![0.0; rows * cols];
                    for c in 0..*cols {
                        for o in 0..*rows {
                            let mut acc = match bv {
                                Some(b) => b[o],
                                None => 0.0,
                            };
                            let wrow = &wv[o * inn..(o + 1) * inn];
                            let xcol = &xv[c * inn..(c + 1) * inn];
                            for i in 0..*inn {
                                acc += wrow[i] * xcol[i];
                            }
                            y[c * rows + o] = acc;
                        }
                    }
                    y
                }
                Op::Slice { x, start } => vals[x.0][*start..*start + node.len].to_vec(),
                Op::Interleave(parts) => {
                    let k = parts.len();
                    let n = node.len / k;
                    let mut y = vec![0.0; node.len];
                    for (j, p) in parts.iter().enumerate() {
                        for c in 0..n {
                            y[c * k + j] = vals[p.0][c];
                        }
                    }
                    y
                }
            };
            if !crate::vecmath::all_finite(&v) {
                return Err(GraphError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            vals.push(v);
        }
        Ok(vals)
    }

    /// Evaluate the scalar output under the given leaf bindings
    /// (declaration order).
    pub fn evaluate(&self, binds: &[&[f64]]) -> Result<f64, GraphError> {
        let out = self.output.ok_or(GraphError::NoOutput)?;
        self.check_bindings(binds)?;
        let vals = self.forward(binds)?;
        Ok(vals[out.0][0])
    }

    /// Evaluate the output and its gradient with respect to every leaf.
    pub fn gradient(&self, binds: &[&[f64]]) -> Result<GradResult, GraphError> {
        let out = self.output.ok_or(GraphError::NoOutput)?;
        self.check_bindings(binds)?;
        let vals = self.forward(binds)?;

        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.len]).collect();
        adj[out.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if adj[idx].iter().all(|&a| a == 0.0) {
                continue;
            }
            let dy = std::mem::take(&mut adj[idx]);
            match &self.nodes[idx].op {
                Op::Leaf { .. } | Op::Const { .. } => {
                    adj[idx] = dy;
                    continue;
                }
                Op::Add(a, b) => {
                    crate::vecmath::axpy(1.0, &dy, &mut adj[a.0]);
                    crate::vecmath::axpy(1.0, &dy, &mut adj[b.0]);
                }
                Op::Sub(a, b) => {
                    crate::vecmath::axpy(1.0, &dy, &mut adj[a.0]);
                    crate::vecmath::axpy(-1.0, &dy, &mut adj[b.0]);
                }
                Op::Mul(a, b) => {
                    for i in 0..dy.len() {
                        adj[a.0][i] += dy[i] * vals[b.0][i];
                    }
                    for i in 0..dy.len() {
                        adj[b.0][i] += dy[i] * vals[a.0][i];
                    }
                }
                Op::Div(a, b) => {
                    for i in 0..dy.len() {
                        let bi = vals[b.0][i];
                        adj[a.0][i] += dy[i] / bi;
                        adj[b.0][i] -= dy[i] * vals[a.0][i] / (bi * bi);
                    }
                }
                Op::Dot(a, b) => {
                    crate::vecmath::axpy(dy[0], &vals[b.0], &mut adj[a.0]);
                    crate::vecmath::axpy(dy[0], &vals[a.0], &mut adj[b.0]);
                }
                Op::Scale(s, v) => {
                    adj[s.0][0] += crate::vecmath::dot(&dy, &vals[v.0]);
                    crate::vecmath::axpy(vals[s.0][0], &dy, &mut adj[v.0]);
                }
                Op::Norm(v) => {
                    let n = vals[idx][0];
                    if n > 0.0 {
                        crate::vecmath::axpy(dy[0] / n, &vals[v.0], &mut adj[v.0]);
                    }
                }
                Op::Relu(v) => {
                    for i in 0..dy.len() {
                        if vals[v.0][i] > 0.0 {
                            adj[v.0][i] += dy[i];
                        }
                    }
                }
                Op::Exp(v) => {
                    for i in 0..dy.len() {
                        adj[v.0][i] += dy[i] * vals[idx][i];
                    }
                }
                Op::Log(v) => {
                    for i in 0..dy.len() {
                        adj[v.0][i] += dy[i] / vals[v.0][i];
                    }
                }
                Op::Sqrt(v) => {
                    for i in 0..dy.len() {
                        adj[v.0][i] += dy[i] / (2.0 * vals[idx][i]);
                    }
                }
                Op::Affine {
                    w,
                    x,
                    bias,
                    rows,
                    inn,
                    cols,
                } => {
                    let (rows, inn, cols) = (*rows, *inn, *cols);
                    for c in 0..cols {
                        for o in 0..rows {
                            let g = dy[c * rows + o];
                            if g == 0.0 {
                                continue;
                            }
                            for i in 0..inn {
                                adj[w.0][o * inn + i] += g * vals[x.0][c * inn + i];
                                adj[x.0][c * inn + i] += g * vals[w.0][o * inn + i];
                            }
                            if let Some(b) = bias {
                                adj[b.0][o] += g;
                            }
                        }
                    }
                }
                Op::Slice { x, start } => {
                    for (i, g) in dy.iter().enumerate() {
                        adj[x.0][start + i] += g;
                    }
                }
                Op::Interleave(parts) => {
                    let k = parts.len();
                    let n = dy.len() / k;
                    for (j, p) in parts.iter().enumerate() {
                        for c in 0..n {
                            adj[p.0][c] += dy[c * k + j];
                        }
                    }
                }
            }
            if !crate::vecmath::all_finite(&dy) {
                return Err(GraphError::NonFiniteAdjoint {
                    node: idx,
                    op: self.nodes[idx].op.name(),
                });
            }
            adj[idx] = dy;
        }

        let mut grads = vec![Vec::new(); self.leaves.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { slot } = node.op {
                if !crate::vecmath::all_finite(&adj[idx]) {
                    return Err(GraphError::NonFiniteAdjoint {
                        node: idx,
                        op: "leaf",
                    });
                }
                grads[slot] = adj[idx].clone();
            }
        }
        Ok(GradResult {
            value: vals[out.0][0],
            grads,
        })
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}
