//! Static dense-tensor graph with reverse-mode differentiation.
//!
//! A [`Graph`] is assembled once by a [`GraphBuilder`]; its node list, shapes and
//! value buffers are fixed from then on. Each execution only rebinds inputs and
//! parameters and overwrites the preallocated buffers, so repeated runs with the
//! same bindings produce bit-identical results.

use std::mem;

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, Zip};
use serde::{Deserialize, Serialize};

use super::AutodiffError;

pub type NodeId = usize;

/// Pointwise nonlinearity of a hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sin,
}

impl Activation {
    /// Highest derivative order that can be evaluated.
    pub const MAX_ORDER: u8 = 3;

    /// `order`-th derivative of the activation at `z`.
    pub fn derivative(self, order: u8, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let s = 1.0 - t * t;
                match order {
                    0 => t,
                    1 => s,
                    2 => -2.0 * t * s,
                    3 => s * (6.0 * t * t - 2.0),
                    _ => f64::NAN,
                }
            }
            Activation::Sin => match order % 4 {
                0 => z.sin(),
                1 => z.cos(),
                2 => -z.sin(),
                _ => -z.cos(),
            },
        }
    }

    /// `order`-th derivative from the cached basis: `tanh z` (tanh) or `(sin z, cos z)` (sin).
    #[inline]
    fn from_basis(self, order: u8, p: f64, q: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let s = 1.0 - p * p;
                match order {
                    0 => p,
                    1 => s,
                    2 => -2.0 * p * s,
                    _ => s * (6.0 * p * p - 2.0),
                }
            }
            Activation::Sin => match order % 4 {
                0 => p,
                1 => q,
                2 => -p,
                _ => -q,
            },
        }
    }

    pub fn parse(name: &str) -> Result<Self, AutodiffError> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "sin" => Ok(Activation::Sin),
            other => Err(AutodiffError::UnsupportedActivation(other.to_string())),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    /// `a · wᵀ` with `a: B×in`, `w: out×in`.
    MatMulT { a: NodeId, w: NodeId },
    /// Row-broadcast bias add, `b: 1×out`.
    AddBias { z: NodeId, b: NodeId },
    /// Activations of one `z` share a `family` whose basis is computed once per pass.
    Act { z: NodeId, kind: Activation, order: u8, family: usize },
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Multiply by a 1×1 node.
    ScaleBy { a: NodeId, s: NodeId },
    Square(NodeId),
    Column(NodeId, usize),
    Mean(NodeId),
    Sum(NodeId),
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: (usize, usize),
    needs_grad: bool,
}

/// Records nodes in topological order; every operand must already exist.
#[derive(Default, Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    params: Vec<NodeId>,
    /// `(z, kind, first node)` per activation family.
    families: Vec<(NodeId, Activation, NodeId)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: (usize, usize), needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, shape, needs_grad });
        self.nodes.len() - 1
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].shape
    }

    fn grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id))
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    /// Bound data with no gradient; returns the node id. Slot index = order of creation.
    pub fn input(&mut self, rows: usize, cols: usize) -> Result<NodeId, AutodiffError> {
        if rows == 0 || cols == 0 {
            return Err(AutodiffError::ZeroSized { rows, cols });
        }
        let id = self.push(Op::Input, (rows, cols), false);
        self.inputs.push(id);
        Ok(id)
    }

    /// Trainable tensor; its adjoint is reported by [`Graph::backward_accumulate`].
    pub fn param(&mut self, rows: usize, cols: usize) -> Result<NodeId, AutodiffError> {
        if rows == 0 || cols == 0 {
            return Err(AutodiffError::ZeroSized { rows, cols });
        }
        let id = self.push(Op::Param, (rows, cols), true);
        self.params.push(id);
        Ok(id)
    }

    pub fn matmul_t(&mut self, a: NodeId, w: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(w)?;
        let (rows, inner) = self.shape(a);
        let (out, w_in) = self.shape(w);
        if inner != w_in {
            return Err(AutodiffError::Shape {
                op: "matmul",
                left: self.shape(a),
                right: self.shape(w),
            });
        }
        let g = self.grad(a) || self.grad(w);
        Ok(self.push(Op::MatMulT { a, w }, (rows, out), g))
    }

    pub fn add_bias(&mut self, z: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(z)?;
        self.check(b)?;
        let (rows, cols) = self.shape(z);
        if self.shape(b) != (1, cols) {
            return Err(AutodiffError::Shape {
                op: "add_bias",
                left: self.shape(z),
                right: self.shape(b),
            });
        }
        let g = self.grad(z) || self.grad(b);
        Ok(self.push(Op::AddBias { z, b }, (rows, cols), g))
    }

    pub fn activation(
        &mut self,
        z: NodeId,
        kind: Activation,
        order: u8,
    ) -> Result<NodeId, AutodiffError> {
        self.check(z)?;
        // The reverse sweep needs one order more than the forward value.
        if order >= Activation::MAX_ORDER {
            return Err(AutodiffError::DerivativeOrder(order));
        }
        let g = self.grad(z);
        let id = self.nodes.len();
        let family = match self.families.iter().position(|&(fz, fk, _)| fz == z && fk == kind) {
            Some(f) => f,
            None => {
                self.families.push((z, kind, id));
                self.families.len() - 1
            }
        };
        Ok(self.push(Op::Act { z, kind, order, family }, self.shape(z), g))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let g = self.grad(a) || self.grad(b);
        Ok(self.push(Op::Mul(a, b), self.shape(a), g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("add", a, b)?;
        let g = self.grad(a) || self.grad(b);
        Ok(self.push(Op::Add(a, b), self.shape(a), g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let g = self.grad(a) || self.grad(b);
        Ok(self.push(Op::Sub(a, b), self.shape(a), g))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let g = self.grad(a);
        Ok(self.push(Op::Scale(a, c), self.shape(a), g))
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(s)?;
        if self.shape(s) != (1, 1) {
            return Err(AutodiffError::Shape {
                op: "scale_by",
                left: self.shape(a),
                right: self.shape(s),
            });
        }
        let g = self.grad(a) || self.grad(s);
        Ok(self.push(Op::ScaleBy { a, s }, self.shape(a), g))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let g = self.grad(a);
        Ok(self.push(Op::Square(a), self.shape(a), g))
    }

    pub fn column(&mut self, a: NodeId, index: usize) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let (rows, cols) = self.shape(a);
        if index >= cols {
            return Err(AutodiffError::Shape {
                op: "column",
                left: (rows, cols),
                right: (1, index),
            });
        }
        let g = self.grad(a);
        Ok(self.push(Op::Column(a, index), (rows, 1), g))
    }

    /// Mean over every entry; 1×1 result.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let g = self.grad(a);
        Ok(self.push(Op::Mean(a), (1, 1), g))
    }

    /// Sum over every entry; 1×1 result.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let g = self.grad(a);
        Ok(self.push(Op::Sum(a), (1, 1), g))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId, AutodiffError> {
        let (&(first, _), rest) = terms.split_first().ok_or(AutodiffError::EmptySum)?;
        self.check(first)?;
        for &(id, _) in rest {
            self.same_shape("weighted_sum", first, id)?;
        }
        let g = terms.iter().any(|&(id, _)| self.grad(id));
        Ok(self.push(Op::WeightedSum(terms.to_vec()), self.shape(first), g))
    }

    pub fn finish(self) -> Graph {
        let values = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.shape))
            .collect::<Vec<_>>();
        let adjoints = self
            .nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    Array2::zeros(n.shape)
                } else {
                    Array2::zeros((0, 0))
                }
            })
            .collect();
        let touched = vec![false; self.nodes.len()];
        let basis = self
            .families
            .iter()
            .map(|&(z, kind, first)| {
                let shape = self.nodes[z].shape;
                let second = match kind {
                    Activation::Tanh => (0, 0),
                    Activation::Sin => shape,
                };
                ActBasis {
                    first,
                    p: Array2::zeros(shape),
                    q: Array2::zeros(second),
                }
            })
            .collect();
        Graph {
            basis,
            nodes: self.nodes,
            values,
            adjoints,
            touched,
            inputs: self.inputs,
            params: self.params,
            executed: false,
        }
    }
}

/// An executable graph with fixed topology and preallocated buffers.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Array2<f64>>,
    adjoints: Vec<Array2<f64>>,
    touched: Vec<bool>,
    basis: Vec<ActBasis>,
    inputs: Vec<NodeId>,
    params: Vec<NodeId>,
    executed: bool,
}

/// Cached `tanh z`, or `sin z` and `cos z`, for one activation family.
#[derive(Clone, Debug)]
struct ActBasis {
    first: NodeId,
    p: Array2<f64>,
    q: Array2<f64>,
}

impl Graph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn input_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_shape(&self, slot: usize) -> (usize, usize) {
        self.nodes[self.params[slot]].shape
    }

    /// Mutable view of an input buffer for in-place binding.
    pub fn input_mut(&mut self, slot: usize) -> ArrayViewMut2<'_, f64> {
        self.executed = false;
        self.values[self.inputs[slot]].view_mut()
    }

    pub fn bind_input(&mut self, slot: usize, data: ArrayView2<f64>) -> Result<(), AutodiffError> {
        let id = *self.inputs.get(slot).ok_or(AutodiffError::UnknownSlot(slot))?;
        Self::bind(&mut self.values[id], data)?;
        self.executed = false;
        Ok(())
    }

    pub fn bind_param(&mut self, slot: usize, data: ArrayView2<f64>) -> Result<(), AutodiffError> {
        let id = *self.params.get(slot).ok_or(AutodiffError::UnknownSlot(slot))?;
        Self::bind(&mut self.values[id], data)?;
        self.executed = false;
        Ok(())
    }

    fn bind(buffer: &mut Array2<f64>, data: ArrayView2<f64>) -> Result<(), AutodiffError> {
        if buffer.dim() != data.dim() {
            return Err(AutodiffError::Shape {
                op: "bind",
                left: buffer.dim(),
                right: data.dim(),
            });
        }
        buffer.assign(&data);
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.values[id].view()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id][[0, 0]]
    }

    pub fn is_executed(&self) -> bool {
        self.executed
    }

    /// Evaluates every node in recorded order.
    pub fn forward(&mut self) {
        for id in 0..self.nodes.len() {
            let (done, rest) = self.values.split_at_mut(id);
            let out = &mut rest[0];
            match &self.nodes[id].op {
                Op::Input | Op::Param => {}
                Op::MatMulT { a, w } => {
                    general_mat_mul(1.0, &done[*a], &done[*w].t(), 0.0, out);
                }
                Op::AddBias { z, b } => {
                    let bias = done[*b].row(0);
                    Zip::from(out.rows_mut())
                        .and(done[*z].rows())
                        .for_each(|mut o, zr| {
                            Zip::from(&mut o)
                                .and(&zr)
                                .and(&bias)
                                .for_each(|o, &z, &b| *o = z + b)
                        });
                }
                Op::Act { z, kind, order, family } => {
                    let (kind, order) = (*kind, *order);
                    let basis = &mut self.basis[*family];
                    if basis.first == id {
                        match kind {
                            Activation::Tanh => {
                                Zip::from(&mut basis.p).and(&done[*z]).for_each(|p, &z| *p = z.tanh());
                            }
                            Activation::Sin => {
                                Zip::from(&mut basis.p)
                                    .and(&mut basis.q)
                                    .and(&done[*z])
                                    .for_each(|p, q, &z| (*p, *q) = z.sin_cos());
                            }
                        }
                    }
                    match kind {
                        Activation::Tanh => Zip::from(out)
                            .and(&basis.p)
                            .for_each(|o, &p| *o = kind.from_basis(order, p, 0.0)),
                        Activation::Sin => Zip::from(out)
                            .and(&basis.p)
                            .and(&basis.q)
                            .for_each(|o, &p, &q| *o = kind.from_basis(order, p, q)),
                    }
                }
                Op::Mul(a, b) => {
                    Zip::from(out)
                        .and(&done[*a])
                        .and(&done[*b])
                        .for_each(|o, &x, &y| *o = x * y);
                }
                Op::Add(a, b) => {
                    Zip::from(out)
                        .and(&done[*a])
                        .and(&done[*b])
                        .for_each(|o, &x, &y| *o = x + y);
                }
                Op::Sub(a, b) => {
                    Zip::from(out)
                        .and(&done[*a])
                        .and(&done[*b])
                        .for_each(|o, &x, &y| *o = x - y);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    Zip::from(out).and(&done[*a]).for_each(|o, &x| *o = c * x);
                }
                Op::ScaleBy { a, s } => {
                    let c = done[*s][[0, 0]];
                    Zip::from(out).and(&done[*a]).for_each(|o, &x| *o = c * x);
                }
                Op::Square(a) => {
                    Zip::from(out).and(&done[*a]).for_each(|o, &x| *o = x * x);
                }
                Op::Column(a, j) => {
                    out.column_mut(0).assign(&done[*a].column(*j));
                }
                Op::Mean(a) => {
                    let src = &done[*a];
                    out[[0, 0]] = ordered_sum(src) / src.len() as f64;
                }
                Op::Sum(a) => {
                    out[[0, 0]] = ordered_sum(&done[*a]);
                }
                Op::WeightedSum(terms) => {
                    out.fill(0.0);
                    for &(t, c) in terms {
                        Zip::from(&mut *out).and(&done[t]).for_each(|o, &x| *o += c * x);
                    }
                }
            }
        }
        self.executed = true;
    }

    /// Reverse sweep from the 1×1 node `seed`, adding each parameter adjoint into `grads`
    /// (indexed by parameter slot).
    pub fn backward_accumulate(
        &mut self,
        seed: NodeId,
        grads: &mut [Array2<f64>],
    ) -> Result<(), AutodiffError> {
        if !self.executed {
            return Err(AutodiffError::NotExecuted);
        }
        if seed >= self.nodes.len() || self.nodes[seed].shape != (1, 1) {
            return Err(AutodiffError::BadSeed(seed));
        }
        if grads.len() != self.params.len() {
            return Err(AutodiffError::GradientSlots {
                expected: self.params.len(),
                found: grads.len(),
            });
        }
        for (slot, g) in grads.iter().enumerate() {
            let shape = self.param_shape(slot);
            if g.dim() != shape {
                return Err(AutodiffError::Shape {
                    op: "gradient",
                    left: shape,
                    right: g.dim(),
                });
            }
        }
        if !self.nodes[seed].needs_grad {
            return Ok(());
        }

        for (adj, node) in self.adjoints.iter_mut().zip(&self.nodes) {
            if node.needs_grad {
                adj.fill(0.0);
            }
        }
        self.touched.fill(false);
        self.adjoints[seed][[0, 0]] = 1.0;
        self.touched[seed] = true;

        for id in (0..=seed).rev() {
            if !self.nodes[id].needs_grad || !self.touched[id] {
                continue;
            }
            let g = mem::take(&mut self.adjoints[id]);
            self.propagate(id, &g);
            self.adjoints[id] = g;
        }

        for (slot, &id) in self.params.iter().enumerate() {
            if self.touched[id] {
                grads[slot] += &self.adjoints[id];
            }
        }
        Ok(())
    }

    fn propagate(&mut self, id: NodeId, g: &Array2<f64>) {
        let values = &self.values;
        let nodes = &self.nodes;
        let adjoints = &mut self.adjoints;
        let touched = &mut self.touched;
        macro_rules! target {
            ($n:expr) => {{
                let n: NodeId = $n;
                if nodes[n].needs_grad {
                    touched[n] = true;
                    Some(&mut adjoints[n])
                } else {
                    None
                }
            }};
        }
        match &nodes[id].op {
            Op::Input | Op::Param => {}
            Op::MatMulT { a, w } => {
                if let Some(adj) = target!(*a) {
                    general_mat_mul(1.0, g, &values[*w], 1.0, adj);
                }
                if let Some(adj) = target!(*w) {
                    general_mat_mul(1.0, &g.t(), &values[*a], 1.0, adj);
                }
            }
            Op::AddBias { z, b } => {
                if let Some(adj) = target!(*z) {
                    *adj += g;
                }
                if let Some(adj) = target!(*b) {
                    let mut acc = adj.row_mut(0);
                    for row in g.rows() {
                        acc += &row;
                    }
                }
            }
            Op::Act { z, kind, order, family } => {
                let (kind, next) = (*kind, *order + 1);
                let basis = &self.basis[*family];
                if let Some(adj) = target!(*z) {
                    match kind {
                        Activation::Tanh => Zip::from(adj)
                            .and(g)
                            .and(&basis.p)
                            .for_each(|a, &g, &p| *a += g * kind.from_basis(next, p, 0.0)),
                        Activation::Sin => Zip::from(adj)
                            .and(g)
                            .and(&basis.p)
                            .and(&basis.q)
                            .for_each(|a, &g, &p, &q| *a += g * kind.from_basis(next, p, q)),
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(adj) = target!(*a) {
                    Zip::from(adj)
                        .and(g)
                        .and(&values[*b])
                        .for_each(|a, &g, &y| *a += g * y);
                }
                if let Some(adj) = target!(*b) {
                    Zip::from(adj)
                        .and(g)
                        .and(&values[*a])
                        .for_each(|a, &g, &x| *a += g * x);
                }
            }
            Op::Add(a, b) => {
                if let Some(adj) = target!(*a) {
                    *adj += g;
                }
                if let Some(adj) = target!(*b) {
                    *adj += g;
                }
            }
            Op::Sub(a, b) => {
                if let Some(adj) = target!(*a) {
                    *adj += g;
                }
                if let Some(adj) = target!(*b) {
                    *adj -= g;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(adj) = target!(*a) {
                    Zip::from(adj).and(g).for_each(|a, &g| *a += c * g);
                }
            }
            Op::ScaleBy { a, s } => {
                let c = values[*s][[0, 0]];
                if let Some(adj) = target!(*a) {
                    Zip::from(adj).and(g).for_each(|a, &g| *a += c * g);
                }
                if let Some(adj) = target!(*s) {
                    let mut acc = 0.0;
                    Zip::from(g)
                        .and(&values[*a])
                        .for_each(|&g, &x| acc += g * x);
                    adj[[0, 0]] += acc;
                }
            }
            Op::Square(a) => {
                if let Some(adj) = target!(*a) {
                    Zip::from(adj)
                        .and(g)
                        .and(&values[*a])
                        .for_each(|a, &g, &x| *a += 2.0 * x * g);
                }
            }
            Op::Column(a, j) => {
                if let Some(adj) = target!(*a) {
                    let mut col = adj.column_mut(*j);
                    col += &g.column(0);
                }
            }
            Op::Mean(a) => {
                let n = values[*a].len() as f64;
                let c = g[[0, 0]] / n;
                if let Some(adj) = target!(*a) {
                    adj.mapv_inplace(|x| x + c);
                }
            }
            Op::Sum(a) => {
                let c = g[[0, 0]];
                if let Some(adj) = target!(*a) {
                    adj.mapv_inplace(|x| x + c);
                }
            }
            Op::WeightedSum(terms) => {
                for &(t, c) in terms {
                    if let Some(adj) = target!(t) {
                        Zip::from(adj).and(g).for_each(|a, &g| *a += c * g);
                    }
                }
            }
        }
    }
}

/// Row-major sequential sum, independent of memory layout.
fn ordered_sum(a: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    for &x in a.iter() {
        acc += x;
    }
    acc
}
