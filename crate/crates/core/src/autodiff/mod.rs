//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of nodes. Every op appends one node holding its
//! value and a record of its parents, so construction order is a topological
//! order and [`Tape::backward`] simply walks the arena backwards. A tape is
//! built fresh for every forward pass.

mod kernels;
mod ops;

pub use ops::{bilinear_sample, BroadcastIndex};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use kernels::{ConvDims, MatmulDims};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Sigmoid,
    Relu,
    Gelu,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ReduceKind {
    Sum,
    Mean,
}

/// `outer × len × inner` view of a tensor around one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisView {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var, ia: BroadcastIndex, ib: BroadcastIndex },
    Unary { kind: UnaryKind, x: Var },
    Affine { x: Var, scale: f64 },
    Matmul { a: Var, b: Var, dims: MatmulDims },
    Softmax { x: Var, view: AxisView },
    Reduce { kind: ReduceKind, x: Var, view: AxisView },
    Variance { x: Var, view: AxisView },
    ReduceAll { kind: ReduceKind, x: Var },
    Maximum { a: Var, b: Var },
    Extremum { x: Var, index: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, total: usize },
    Gather { x: Var, index: Vec<usize> },
    Reshape { x: Var },
    LayerNorm { x: Var, len: usize, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, dims: ConvDims },
    Bilinear { map: Var, points: Var, batch: usize, h: usize, w: usize, c: usize, p: usize },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// The recorded computation of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient w.r.t. the leaf `v`, or `None` when `v` does not require
    /// grad, is not reachable from the loss, or is an intermediate value.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf. It participates in differentiation when
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{name} produced non-finite value {bad}")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // Ops over constants only need their value.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Tensor::from_parts(shape, data), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`, visiting every node at most once
    /// in reverse construction order. Gradients accumulate across multiple
    /// uses of a value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or_else(|| Error::Backward(format!("{loss:?} is not on this tape")))?;
        if node.value.len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", node.value.shape())));
        }
        if !node.requires_grad {
            return Err(Error::Backward("loss is detached from every differentiable input".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            visited += 1;
            self.backward_node(id, &g, &mut grads);
            // Intermediate gradients are released once propagated; only
            // differentiable leaves keep theirs.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, ia, ib } => {
                let av = self.data(*a);
                let bv = self.data(*b);
                if self.requires_grad(*a) {
                    let da = slot(grads, *a, av.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ja, jb) = (ia.get(i), ib.get(i));
                        da[ja] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * bv[jb],
                            BinaryKind::Div => gi / bv[jb],
                        };
                    }
                }
                if self.requires_grad(*b) {
                    let db = slot(grads, *b, bv.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ja, jb) = (ia.get(i), ib.get(i));
                        db[jb] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[ja],
                            BinaryKind::Div => -gi * av[ja] / (bv[jb] * bv[jb]),
                        };
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.data(*x);
                let dx = slot(grads, *x, xv.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * ops::unary_derivative(*kind, xv[i], out[i]);
                }
            }
            Op::Affine { x, scale } => {
                let dx = slot(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * scale);
            }
            Op::Matmul { a, b, dims } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let (ra, rb) = (self.requires_grad(*a), self.requires_grad(*b));
                // `a` and `b` may alias; take the buffers one at a time.
                if ra {
                    let mut da = grads[a.0].take().unwrap_or_else(|| vec![0.0; av.len()]);
                    kernels::matmul_backward(av, bv, g, *dims, Some(&mut da), None);
                    grads[a.0] = Some(da);
                }
                if rb {
                    let mut db = grads[b.0].take().unwrap_or_else(|| vec![0.0; bv.len()]);
                    kernels::matmul_backward(av, bv, g, *dims, None, Some(&mut db));
                    grads[b.0] = Some(db);
                }
            }
            Op::Softmax { x, view } => {
                let dx = slot(grads, *x, out.len());
                let AxisView { outer, len, inner } = *view;
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = 0.0;
                        for l in 0..len {
                            s += g[base + l * inner] * out[base + l * inner];
                        }
                        for l in 0..len {
                            let j = base + l * inner;
                            dx[j] += out[j] * (g[j] - s);
                        }
                    }
                }
            }
            Op::Reduce { kind, x, view } => {
                let AxisView { outer, len, inner } = *view;
                let dx = slot(grads, *x, outer * len * inner);
                let f = if *kind == ReduceKind::Mean { 1.0 / len as f64 } else { 1.0 };
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] += g[o * inner + i] * f;
                        }
                    }
                }
            }
            Op::Variance { x, view } => {
                let AxisView { outer, len, inner } = *view;
                let xv = self.data(*x);
                let dx = slot(grads, *x, xv.len());
                let n = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let mean = (0..len).map(|l| xv[(o * len + l) * inner + i]).sum::<f64>() / n;
                        for l in 0..len {
                            let j = (o * len + l) * inner + i;
                            dx[j] += g[o * inner + i] * 2.0 * (xv[j] - mean) / n;
                        }
                    }
                }
            }
            Op::ReduceAll { kind, x } => {
                let n = self.value(*x).len();
                let f = if *kind == ReduceKind::Mean { g[0] / n as f64 } else { g[0] };
                slot(grads, *x, n).iter_mut().for_each(|d| *d += f);
            }
            Op::Maximum { a, b } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let da = slot(grads, *a, av.len());
                    for i in 0..g.len() {
                        if av[i] >= bv[i] {
                            da[i] += g[i];
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let db = slot(grads, *b, bv.len());
                    for i in 0..g.len() {
                        if av[i] < bv[i] {
                            db[i] += g[i];
                        }
                    }
                }
            }
            Op::Extremum { x, index } => {
                let n = self.value(*x).len();
                slot(grads, *x, n)[*index] += g[0];
            }
            Op::Concat { parts, outer, total } => {
                let mut offset = 0;
                for &(p, chunk) in parts {
                    if self.requires_grad(p) {
                        let dp = slot(grads, p, outer * chunk);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            dp[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Gather { x, index } => {
                let n = self.value(*x).len();
                let dx = slot(grads, *x, n);
                for (i, &j) in index.iter().enumerate() {
                    dx[j] += g[i];
                }
            }
            Op::Reshape { x } => {
                let dx = slot(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            Op::LayerNorm { x, len, inv_std } => {
                let dx = slot(grads, *x, g.len());
                let n = *len as f64;
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * len..(r + 1) * len];
                    let yr = &out[r * len..(r + 1) * len];
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = kernels::dot(gr, yr) / n;
                    for l in 0..*len {
                        dx[r * len + l] += is * (gr[l] - mg - yr[l] * mgy);
                    }
                }
            }
            Op::Conv2d { x, w, dims } => {
                let (xv, wv) = (self.data(*x), self.data(*w));
                if self.requires_grad(*x) {
                    let dx = slot(grads, *x, xv.len());
                    kernels::conv2d_backward(xv, wv, g, *dims, Some(dx), None);
                }
                if self.requires_grad(*w) {
                    let dw = slot(grads, *w, wv.len());
                    kernels::conv2d_backward(xv, wv, g, *dims, None, Some(dw));
                }
            }
            Op::Bilinear { map, points, batch, h, w, c, p } => {
                let (mv, pv) = (self.data(*map), self.data(*points));
                if self.requires_grad(*map) {
                    let dm = slot(grads, *map, mv.len());
                    kernels::bilinear_backward(mv, pv, g, *batch, *h, *w, *c, *p, Some(dm), None);
                }
                if self.requires_grad(*points) {
                    let dp = slot(grads, *points, pv.len());
                    kernels::bilinear_backward(mv, pv, g, *batch, *h, *w, *c, *p, None, Some(dp));
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.data(*logits);
                let n = z.len() as f64;
                let dz = slot(grads, *logits, z.len());
                for i in 0..z.len() {
                    dz[i] += g[0] * (ops::sigmoid(z[i]) - targets[i]) / n;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}
