//! Define-by-run computation tape with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its operands and cached output. [`Tape::backward`] sweeps the nodes in
//! reverse topological order (which is simply reverse insertion order) and
//! accumulates exact gradients. Tapes are cheap and rebuilt per example or
//! batch; parameters live outside the tape in a
//! [`ParamStore`](super::params::ParamStore) and are attached as leaf nodes.

use super::array::NumArray;
use super::params::ParamStore;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Sqrt,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    /// Leaf holding a constant; receives a gradient but propagates nowhere.
    Const,
    /// Leaf bound to a parameter slot in the store used for this pass.
    Param {
        slot: usize,
    },
    /// y = x W + b with x:[n], W:[n,m], b:[m].
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Unary {
        kind: UnaryKind,
        x: NodeId,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    /// y = scale * x + shift, elementwise.
    ScaleShift {
        x: NodeId,
        scale: f64,
    },
    Concat {
        parts: Box<[NodeId]>,
    },
    /// Scalar sum of all entries.
    Sum {
        x: NodeId,
    },
    /// y = max(x, floor), elementwise.
    ClampMin {
        x: NodeId,
        floor: f64,
    },
}

struct Node {
    op: Op,
    value: NumArray,
    grad: Option<Vec<f64>>,
}

/// Per-parameter gradients produced by one backward pass, slot-indexed.
///
/// Kept separate from the store so per-example gradients can be computed
/// in parallel and merged in a deterministic order.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_slot: Vec<Option<NumArray>>,
}

impl Gradients {
    pub fn empty(n_slots: usize) -> Self {
        Self {
            by_slot: vec![None; n_slots],
        }
    }

    pub fn slot(&self, slot: usize) -> Option<&NumArray> {
        self.by_slot.get(slot).and_then(|g| g.as_ref())
    }

    /// Adds `other` into `self`, elementwise per slot.
    pub fn merge(&mut self, other: &Gradients) {
        if self.by_slot.len() < other.by_slot.len() {
            self.by_slot.resize(other.by_slot.len(), None);
        }
        for (slot, g) in other.by_slot.iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut self.by_slot[slot] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                dst => *dst = Some(g.clone()),
            }
        }
    }

    /// Scales every gradient by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for g in self.by_slot.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub(crate) fn by_slot(&self) -> &[Option<NumArray>] {
        &self.by_slot
    }
}

/// Recorded forward pass supporting a single backward sweep.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            param_nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: NumArray) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value recorded on tape");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &NumArray {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward's loss w.r.t. node `id`, if the node
    /// was reached by the sweep.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn constant(&mut self, value: NumArray) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> NodeId {
        self.constant(NumArray::vector(data))
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(NumArray::scalar(v))
    }

    /// Leaf node for parameter `slot`, reused if already on this tape.
    pub fn param(&mut self, store: &ParamStore, slot: usize) -> NodeId {
        if self.param_nodes.len() < store.len() {
            self.param_nodes.resize(store.len(), None);
        }
        if let Some(id) = self.param_nodes[slot] {
            return id;
        }
        let id = self.push(Op::Param { slot }, store.value(slot).clone());
        self.param_nodes[slot] = Some(id);
        id
    }

    /// y = x W + b. Shapes: x [n], W [n, m], b [m].
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.nodes[w.0].value.dims2()?;
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[b.0].value.data();
        if xv.len() != rows {
            return Err(Error::Dim(format!(
                "affine: input length {} vs weight rows {}",
                xv.len(),
                rows
            )));
        }
        if bv.len() != cols {
            return Err(Error::Dim(format!(
                "affine: bias length {} vs weight cols {}",
                bv.len(),
                cols
            )));
        }
        let mut y = bv.to_vec();
        let wd = self.nodes[w.0].value.data();
        for (i, &xi) in xv.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &wd[i * cols..(i + 1) * cols];
            for (yj, &wj) in y.iter_mut().zip(row) {
                *yj += xi * wj;
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, NumArray::vector(y)))
    }

    pub fn unary(&mut self, kind: UnaryKind, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.data();
        let out: Vec<f64> = match kind {
            UnaryKind::Relu => xv.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            UnaryKind::Tanh => xv.iter().map(|&v| v.tanh()).collect(),
            UnaryKind::Sigmoid => xv.iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::Softplus => xv.iter().map(|&v| softplus(v)).collect(),
            UnaryKind::Exp => xv.iter().map(|&v| v.exp()).collect(),
            UnaryKind::Ln => xv.iter().map(|&v| v.ln()).collect(),
            UnaryKind::Sqrt => xv.iter().map(|&v| v.sqrt()).collect(),
            UnaryKind::Neg => xv.iter().map(|&v| -v).collect(),
        };
        self.push(Op::Unary { kind, x }, NumArray::vector(out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        if av.len() != bv.len() {
            return Err(Error::Dim(format!(
                "elementwise {:?}: lengths {} vs {}",
                kind,
                av.len(),
                bv.len()
            )));
        }
        let out: Vec<f64> = match kind {
            BinaryKind::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            BinaryKind::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
            BinaryKind::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            BinaryKind::Div => av.iter().zip(bv).map(|(x, y)| x / y).collect(),
        };
        Ok(self.push(Op::Binary { kind, a, b }, NumArray::vector(out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// y = scale * x + shift, elementwise.
    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| scale * v + shift)
            .collect();
        self.push(Op::ScaleShift { x, scale }, NumArray::vector(out))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.len()).sum();
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        self.push(
            Op::Concat {
                parts: parts.to_vec().into_boxed_slice(),
            },
            NumArray::vector(out),
        )
    }

    /// Scalar sum of all entries of `x`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum { x }, NumArray::scalar(s))
    }

    /// y = max(x, floor), elementwise.
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| v.max(floor))
            .collect();
        self.push(Op::ClampMin { x, floor }, NumArray::vector(out))
    }

    /// Reverse sweep from a scalar `loss`. Returns slot-indexed parameter
    /// gradients; per-node gradients stay queryable via [`Tape::grad`].
    ///
    /// A second call without rebuilding the tape is rejected: gradients
    /// accumulate additively and would silently double.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; rebuild the tape before differentiating again"
                    .into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;

        // Node gradients live in a parallel buffer so node values can be
        // read while operand gradients are written.
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        let mut param_grads = Gradients::empty(self.param_nodes.len());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            match &nodes[i].op {
                Op::Const => {}
                Op::Param { slot } => {
                    let entry = &mut param_grads.by_slot[*slot];
                    match entry {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => {
                            let mut arr = NumArray::zeros(nodes[i].value.shape());
                            arr.data_mut().copy_from_slice(&g);
                            *entry = Some(arr);
                        }
                    }
                }
                Op::Affine { x, w, b } => {
                    let cols = g.len();
                    let xv = nodes[x.0].value.data();
                    let wv = nodes[w.0].value.data();
                    let gx = buf(&mut grads, x.0, xv.len());
                    for (n, gxn) in gx.iter_mut().enumerate() {
                        let row = &wv[n * cols..(n + 1) * cols];
                        let mut acc = 0.0;
                        for (gj, wj) in g.iter().zip(row) {
                            acc += gj * wj;
                        }
                        *gxn += acc;
                    }
                    let gw = buf(&mut grads, w.0, wv.len());
                    for (n, &xn) in xv.iter().enumerate() {
                        if xn == 0.0 {
                            continue;
                        }
                        let row = &mut gw[n * cols..(n + 1) * cols];
                        for (gwj, gj) in row.iter_mut().zip(&g) {
                            *gwj += xn * gj;
                        }
                    }
                    let gb = buf(&mut grads, b.0, cols);
                    for (gbj, gj) in gb.iter_mut().zip(&g) {
                        *gbj += gj;
                    }
                }
                Op::Unary { kind, x } => {
                    let xv = nodes[x.0].value.data();
                    let yv = nodes[i].value.data();
                    let gx = buf(&mut grads, x.0, xv.len());
                    match kind {
                        UnaryKind::Relu => {
                            for ((gxj, gj), xj) in gx.iter_mut().zip(&g).zip(xv) {
                                if *xj > 0.0 {
                                    *gxj += gj;
                                }
                            }
                        }
                        UnaryKind::Tanh => {
                            for ((gxj, gj), yj) in gx.iter_mut().zip(&g).zip(yv) {
                                *gxj += gj * (1.0 - yj * yj);
                            }
                        }
                        UnaryKind::Sigmoid => {
                            for ((gxj, gj), yj) in gx.iter_mut().zip(&g).zip(yv) {
                                *gxj += gj * yj * (1.0 - yj);
                            }
                        }
                        UnaryKind::Softplus => {
                            for ((gxj, gj), xj) in gx.iter_mut().zip(&g).zip(xv) {
                                *gxj += gj * sigmoid(*xj);
                            }
                        }
                        UnaryKind::Exp => {
                            for ((gxj, gj), yj) in gx.iter_mut().zip(&g).zip(yv) {
                                *gxj += gj * yj;
                            }
                        }
                        UnaryKind::Ln => {
                            for ((gxj, gj), xj) in gx.iter_mut().zip(&g).zip(xv) {
                                *gxj += gj / xj;
                            }
                        }
                        UnaryKind::Sqrt => {
                            for ((gxj, gj), yj) in gx.iter_mut().zip(&g).zip(yv) {
                                *gxj += gj * 0.5 / yj;
                            }
                        }
                        UnaryKind::Neg => {
                            for (gxj, gj) in gx.iter_mut().zip(&g) {
                                *gxj -= gj;
                            }
                        }
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (a, b) = (*a, *b);
                    let len = g.len();
                    match kind {
                        BinaryKind::Add => {
                            let ga = buf(&mut grads, a.0, len);
                            for (gaj, gj) in ga.iter_mut().zip(&g) {
                                *gaj += gj;
                            }
                            let gb = buf(&mut grads, b.0, len);
                            for (gbj, gj) in gb.iter_mut().zip(&g) {
                                *gbj += gj;
                            }
                        }
                        BinaryKind::Sub => {
                            let ga = buf(&mut grads, a.0, len);
                            for (gaj, gj) in ga.iter_mut().zip(&g) {
                                *gaj += gj;
                            }
                            let gb = buf(&mut grads, b.0, len);
                            for (gbj, gj) in gb.iter_mut().zip(&g) {
                                *gbj -= gj;
                            }
                        }
                        BinaryKind::Mul => {
                            {
                                let bv = nodes[b.0].value.data();
                                let ga = buf(&mut grads, a.0, len);
                                for ((gaj, gj), bj) in ga.iter_mut().zip(&g).zip(bv) {
                                    *gaj += gj * bj;
                                }
                            }
                            let av = nodes[a.0].value.data();
                            let gb = buf(&mut grads, b.0, len);
                            for ((gbj, gj), aj) in gb.iter_mut().zip(&g).zip(av) {
                                *gbj += gj * aj;
                            }
                        }
                        BinaryKind::Div => {
                            {
                                let bv = nodes[b.0].value.data();
                                let ga = buf(&mut grads, a.0, len);
                                for ((gaj, gj), bj) in ga.iter_mut().zip(&g).zip(bv) {
                                    *gaj += gj / bj;
                                }
                            }
                            let bv = nodes[b.0].value.data();
                            let yv = nodes[i].value.data();
                            let gb = buf(&mut grads, b.0, len);
                            for (((gbj, gj), yj), bj) in gb.iter_mut().zip(&g).zip(yv).zip(bv) {
                                *gbj -= gj * yj / bj;
                            }
                        }
                    }
                }
                Op::ScaleShift { x, scale } => {
                    let scale = *scale;
                    let gx = buf(&mut grads, x.0, g.len());
                    for (gxj, gj) in gx.iter_mut().zip(&g) {
                        *gxj += scale * gj;
                    }
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts.iter() {
                        let len = self.nodes[p.0].value.len();
                        let gp = buf(&mut grads, p.0, len);
                        for (gpj, gj) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *gpj += gj;
                        }
                        offset += len;
                    }
                }
                Op::Sum { x } => {
                    let gs = g[0];
                    let len = nodes[x.0].value.len();
                    let gx = buf(&mut grads, x.0, len);
                    for gxj in gx.iter_mut() {
                        *gxj += gs;
                    }
                }
                Op::ClampMin { x, floor } => {
                    let floor = *floor;
                    let xv = nodes[x.0].value.data();
                    let gx = buf(&mut grads, x.0, g.len());
                    for ((gxj, gj), xj) in gx.iter_mut().zip(&g).zip(xv) {
                        if *xj > floor {
                            *gxj += gj;
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(param_grads)
    }

    /// Convenience: backward then accumulate into `store` gradients.
    pub fn backward_into(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }
}

fn buf(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Parameter node handles for one gated recurrent cell.
///
/// Four gates, each an affine map over the concatenated `[input, hidden]`
/// vector: input gate, forget gate, output gate and candidate state.
#[derive(Debug, Clone, Copy)]
pub struct CellNodes {
    pub w_input: NodeId,
    pub b_input: NodeId,
    pub w_forget: NodeId,
    pub b_forget: NodeId,
    pub w_output: NodeId,
    pub b_output: NodeId,
    pub w_cand: NodeId,
    pub b_cand: NodeId,
}

/// One step of the gated recurrent cell (standard LSTM update):
///
/// ```text
/// i = sigmoid(W_i [x, h] + b_i)    f = sigmoid(W_f [x, h] + b_f)
/// o = sigmoid(W_o [x, h] + b_o)    g = tanh(W_g [x, h] + b_g)
/// c' = f * c + i * g               h' = o * tanh(c')
/// ```
pub fn recurrent_cell_step(
    tape: &mut Tape,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    cell: &CellNodes,
) -> Result<(NodeId, NodeId)> {
    let xh = tape.concat(&[x, h_prev]);
    let pre_i = tape.affine(xh, cell.w_input, cell.b_input)?;
    let pre_f = tape.affine(xh, cell.w_forget, cell.b_forget)?;
    let pre_o = tape.affine(xh, cell.w_output, cell.b_output)?;
    let pre_g = tape.affine(xh, cell.w_cand, cell.b_cand)?;
    let gate_i = tape.unary(UnaryKind::Sigmoid, pre_i);
    let gate_f = tape.unary(UnaryKind::Sigmoid, pre_f);
    let gate_o = tape.unary(UnaryKind::Sigmoid, pre_o);
    let cand = tape.unary(UnaryKind::Tanh, pre_g);
    let keep = tape.mul(gate_f, c_prev)?;
    let write = tape.mul(gate_i, cand)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.unary(UnaryKind::Tanh, c_next);
    let h_next = tape.mul(gate_o, c_act)?;
    Ok((h_next, c_next))
}
