use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, AxisSplit, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of one [`Graph`]. Handles are plain indices and carry no
/// lifetime; passing a handle from another graph is caught by bounds checks
/// only when it is out of range, so keep graphs and handles together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Sqrt,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Relu(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        axis: AxisSplit,
        out_len: usize,
    },
    Softmax {
        x: NodeId,
        axis: AxisSplit,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    Dropout {
        x: NodeId,
        mask: Vec<S>,
    },
    Select {
        x: NodeId,
        axis: AxisSplit,
        index: usize,
    },
    Reshape(NodeId),
}

impl<S> Op<S> {
    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Exp(a) | Op::Sqrt(a) | Op::Sum(a) | Op::Mean(a) | Op::Reshape(a) => {
                vec![a]
            }
            Op::Linear { x, w, b, .. } => {
                let mut p = vec![x, w];
                p.extend(b);
                p
            }
            Op::Softmax { x, .. } | Op::Dropout { x, .. } | Op::Select { x, .. } => vec![x],
            Op::Conv { x, w, b, .. } => vec![x, w, b],
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Define-by-run tape of dense row-major tensors.
///
/// Nodes are appended in creation order, so every node's parents precede it
/// and the graph is acyclic by construction. Gradients of leaves accumulate
/// across [`Graph::backward`] calls until [`Graph::zero_grad`].
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Graph<S> {
    /// An inference graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            dropout_rng: None,
        }
    }

    /// A training graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Parents of a node, all of which have smaller ids.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Accumulated gradient of a leaf, or `None` if nothing has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.leaf_grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Accumulated gradient of a leaf, zeros when nothing has reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<S> {
        self.grad(id)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); self.nodes[id.0].value.len()])
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "node {} does not belong to this graph ({} nodes)",
                id.0,
                self.nodes.len()
            )))
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> NodeId {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<NodeId> {
        if numel(shape) != data.len() {
            return Err(Error::shape("leaf", shape, &[data.len()]));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: data,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A trainable leaf; [`Graph::backward`] fills its gradient.
    pub fn variable(&mut self, shape: &[usize], data: Vec<S>) -> Result<NodeId> {
        self.leaf(shape, data, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<NodeId> {
        self.leaf(shape, data, false)
    }

    /// Applies one of the pointwise ops. Binary ops need equal shapes, except
    /// that a single-element operand is broadcast against the other.
    pub fn elementwise(&mut self, op: Elementwise, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(Error::Usage(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Usage(format!("{op:?} takes one operand"))),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Elementwise::Sqrt, a)
    }

    fn binary(&mut self, op: Elementwise, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (na, nb) = (numel(sa), numel(sb));
        let shape = if sa == sb || nb == 1 {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else {
            let name = match op {
                Elementwise::Add => "add",
                Elementwise::Sub => "sub",
                _ => "mul",
            };
            return Err(Error::shape(name, sa, sb));
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = numel(&shape);
        let at = |v: &[S], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let f: fn(S, S) -> S = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let value = (0..n).map(|i| f(at(va, i), at(vb, i))).collect();
        let op = match op {
            Elementwise::Add => Op::Add(a, b),
            Elementwise::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(shape, value, op))
    }

    fn unary(&mut self, op: Elementwise, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let x = &self.nodes[a.0].value;
        let (value, op): (Vec<S>, Op<S>) = match op {
            Elementwise::Relu => (x.iter().map(|&v| v.max(S::zero())).collect(), Op::Relu(a)),
            Elementwise::Exp => (x.iter().map(|v| v.exp()).collect(), Op::Exp(a)),
            Elementwise::Sqrt => {
                if let Some(v) = x.iter().find(|v| **v < S::zero()) {
                    return Err(Error::Numeric(format!("sqrt of negative value {v}")));
                }
                (x.iter().map(|v| v.sqrt()).collect(), Op::Sqrt(a))
            }
            other => return Err(Error::Usage(format!("{other:?} is not unary"))),
        };
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, op))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        self.check(a)?;
        let value = self.nodes[a.0].value.iter().map(|&v| v * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Scale(a, c)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.nodes[a.0].value.iter().fold(S::zero(), |acc, &v| acc + v);
        Ok(self.push(vec![1], vec![s], Op::Sum(a)))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let s = v.iter().fold(S::zero(), |acc, &x| acc + x) / S::of(v.len() as f64);
        Ok(self.push(vec![1], vec![s], Op::Mean(a)))
    }

    /// `y[i] = sum_j w[i, j] * x[j]` for `w: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.check(w)?;
        self.check(x)?;
        let (sw, sx) = (&self.nodes[w.0].shape, &self.nodes[x.0].shape);
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::shape("matvec", sw, sx));
        }
        self.linear(x, w, None, 0)
    }

    /// Applies the matrix `w: [m, n]` along `axis` of `x` (which must have
    /// length `n` there), plus an optional bias `b: [m]` per output index.
    /// The output equals `x`'s shape with `axis` resized to `m`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        if axis >= sx.len() || sw.len() != 2 || sw[1] != sx[axis] {
            return Err(Error::shape("linear", &sw, &sx));
        }
        let out_len = sw[0];
        if let Some(b) = b {
            self.check(b)?;
            let sb = &self.nodes[b.0].shape;
            if numel(sb) != out_len {
                return Err(Error::shape("linear bias", sb, &[out_len]));
            }
        }
        let ax = AxisSplit::of(&sx, axis);
        let mut shape = sx;
        shape[axis] = out_len;
        let mut value = vec![S::zero(); numel(&shape)];
        kernels::linear_forward(
            ax,
            out_len,
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| self.nodes[b.0].value.as_slice()),
            &mut value,
        );
        Ok(self.push(
            shape,
            value,
            Op::Linear {
                x,
                w,
                b,
                axis: ax,
                out_len,
            },
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Usage(format!("softmax over axis {axis} of shape {shape:?}")));
        }
        let xv = &self.nodes[x.0].value;
        if let Some(v) = xv.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("softmax input is not finite: {v}")));
        }
        let ax = AxisSplit::of(&shape, axis);
        let mut value = vec![S::zero(); xv.len()];
        kernels::softmax_forward(ax, xv, &mut value);
        Ok(self.push(shape, value, Op::Softmax { x, axis: ax }))
    }

    /// Causal dilated convolution over `x: [c_in, steps, batch]` with kernel
    /// `w: [c_out, c_in, k]` and bias `b: [c_out]`. Tap `k - 1` reads the
    /// current step and tap `j` reads `(k - 1 - j) * dilation` steps back;
    /// steps before the start of the sequence read as zero, so the output
    /// keeps `steps` positions.
    pub fn causal_conv(&mut self, x: NodeId, w: NodeId, b: NodeId, dilation: usize) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(Error::shape("causal_conv", &sw, &sx));
        }
        if numel(&sb) != sw[0] {
            return Err(Error::shape("causal_conv bias", &sb, &[sw[0]]));
        }
        if sw[2] == 0 || dilation == 0 {
            return Err(Error::Usage("kernel size and dilation must be positive".into()));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            c_out: sw[0],
            kernel: sw[2],
            dilation,
            steps: sx[1],
            batch: sx[2],
        };
        let shape = vec![geom.c_out, geom.steps, geom.batch];
        let mut value = vec![S::zero(); numel(&shape)];
        kernels::conv_forward(
            &geom,
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            &mut value,
        );
        Ok(self.push(shape, value, Op::Conv { x, w, b, geom }))
    }

    /// Inverted dropout: in a training graph each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Returns `x` itself in inference graphs or when `rate == 0`.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<S> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
            .collect();
        let value = self.nodes[x.0].value.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, value, Op::Dropout { x, mask }))
    }

    /// Picks position `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        self.check(x)?;
        let sx = self.nodes[x.0].shape.clone();
        if axis >= sx.len() || index >= sx[axis] {
            return Err(Error::Usage(format!(
                "select index {index} on axis {axis} of shape {sx:?}"
            )));
        }
        let ax = AxisSplit::of(&sx, axis);
        let xv = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(ax.outer * ax.inner);
        for o in 0..ax.outer {
            let start = (o * ax.len + index) * ax.inner;
            value.extend_from_slice(&xv[start..start + ax.inner]);
        }
        let mut shape = sx;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(shape, value, Op::Select { x, axis: ax, index }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let old = &self.nodes[x.0].shape;
        if numel(old) != numel(shape) {
            return Err(Error::shape("reshape", old, shape));
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }

    /// Reverse sweep from a single-element `root`. Adds `d root / d leaf`
    /// into the gradient of every trainable leaf the root depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check(root)?;
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate_broadcast(&mut grads, nodes, a, &g, |v, _| v);
                    accumulate_broadcast(&mut grads, nodes, b, &g, |v, _| v);
                }
                Op::Sub(a, b) => {
                    accumulate_broadcast(&mut grads, nodes, a, &g, |v, _| v);
                    accumulate_broadcast(&mut grads, nodes, b, &g, |v, _| -v);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let other = |v: &Vec<S>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
                    accumulate_broadcast(&mut grads, nodes, a, &g, |v, i| v * other(vb, i));
                    accumulate_broadcast(&mut grads, nodes, b, &g, |v, i| v * other(va, i));
                }
                Op::Scale(a, c) => {
                    if let Some(d) = slot(&mut grads, nodes, a) {
                        kernels::axpy(d, c, &g);
                    }
                }
                Op::Relu(a) => {
                    if let Some(d) = slot(&mut grads, nodes, a) {
                        for ((d, &gv), &x) in d.iter_mut().zip(&g).zip(&nodes[a.0].value) {
                            if x > S::zero() {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    if let Some(d) = slot(&mut grads, nodes, a) {
                        for ((d, &gv), &y) in d.iter_mut().zip(&g).zip(&node.value) {
                            *d += gv * y;
                        }
                    }
                }
                Op::Sqrt(a) => {
                    if let Some(d) = slot(&mut grads, nodes, a) {
                        let half = S::of(0.5);
                        for ((d, &gv), &y) in d.iter_mut().zip(&g).zip(&node.value) {
                            *d += gv * half / y;
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(d) = slot(&mut grads, nodes, a) {
                        d.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(d) = slot(&mut grads, nodes, a) {
                        let share = g[0] / S::of(d.len() as f64);
                        d.iter_mut().for_each(|d| *d += share);
                    }
                }
                Op::Linear { x, w, b, axis, out_len } => {
                    let mut dx = take_slot(&mut grads, nodes, x);
                    let mut dw = take_slot(&mut grads, nodes, w);
                    let mut db = b.and_then(|b| take_slot(&mut grads, nodes, b));
                    kernels::linear_backward(
                        axis,
                        out_len,
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        &g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    put_back(&mut grads, x, dx);
                    put_back(&mut grads, w, dw);
                    if let Some(b) = b {
                        put_back(&mut grads, b, db);
                    }
                }
                Op::Softmax { x, axis } => {
                    if let Some(d) = slot(&mut grads, nodes, x) {
                        kernels::softmax_backward(axis, &node.value, &g, d);
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let mut dx = take_slot(&mut grads, nodes, x);
                    let mut dw = take_slot(&mut grads, nodes, w);
                    let mut db = take_slot(&mut grads, nodes, b);
                    kernels::conv_backward(
                        &geom,
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        &g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    put_back(&mut grads, x, dx);
                    put_back(&mut grads, w, dw);
                    put_back(&mut grads, b, db);
                }
                Op::Dropout { x, ref mask } => {
                    if let Some(d) = slot(&mut grads, nodes, x) {
                        for ((d, &gv), &m) in d.iter_mut().zip(&g).zip(mask) {
                            *d += gv * m;
                        }
                    }
                }
                Op::Select { x, axis, index } => {
                    if let Some(d) = slot(&mut grads, nodes, x) {
                        for o in 0..axis.outer {
                            let start = (o * axis.len + index) * axis.inner;
                            let src = &g[o * axis.inner..(o + 1) * axis.inner];
                            d[start..start + axis.inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(d) = slot(&mut grads, nodes, x) {
                        d.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer of `id`, created zeroed on first use; `None` when `id`
/// does not need a gradient.
fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], id: NodeId) -> Option<&'a mut Vec<S>> {
    let node = &nodes[id.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
}

fn take_slot<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], id: NodeId) -> Option<Vec<S>> {
    slot(grads, nodes, id)?;
    grads[id.0].take()
}

/// Returns a buffer taken by [`take_slot`]. When one node feeds the same op
/// twice the second take finds nothing, so merge instead of overwrite.
fn put_back<S: Scalar>(grads: &mut [Option<Vec<S>>], id: NodeId, buf: Option<Vec<S>>) {
    let Some(buf) = buf else { return };
    match &mut grads[id.0] {
        Some(existing) => existing.iter_mut().zip(&buf).for_each(|(e, &v)| *e += v),
        empty @ None => *empty = Some(buf),
    }
}

fn accumulate_broadcast<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    id: NodeId,
    g: &[S],
    f: impl Fn(S, usize) -> S,
) {
    let Some(d) = slot(grads, nodes, id) else { return };
    if d.len() == g.len() {
        for (i, (d, &v)) in d.iter_mut().zip(g).enumerate() {
            *d += f(v, i);
        }
    } else {
        let mut total = S::zero();
        for (i, &v) in g.iter().enumerate() {
            total += f(v, i);
        }
        d[0] += total;
    }
}
