use super::kernels::{self, ConvDims, MatmulDims};
use super::{AxisView, BinaryKind, Op, ReduceKind, Tape, UnaryKind, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{numel, strides};

/// Maps an output element of a broadcasting op back to an operand element.
#[derive(Debug)]
pub enum BroadcastIndex {
    Same,
    Scalar,
    /// Operand equals a trailing block of the output.
    Modulo(usize),
    Map(Vec<usize>),
}

impl BroadcastIndex {
    #[inline]
    pub fn get(&self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Scalar => 0,
            Self::Modulo(n) => i % n,
            Self::Map(m) => m[i],
        }
    }

    fn build(operand: &[usize], out: &[usize]) -> Self {
        if operand == out {
            return Self::Same;
        }
        let n = numel(operand);
        if n == 1 {
            return Self::Scalar;
        }
        let trimmed: Vec<usize> = operand.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Self::Modulo(n);
        }
        // General case: zero stride on broadcast axes.
        let pad = out.len() - operand.len();
        let op_strides = strides(operand);
        let eff: Vec<usize> = (0..out.len()).map(|ax| if ax < pad || operand[ax - pad] == 1 { 0 } else { op_strides[ax - pad] }).collect();
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out.len()];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                off += eff[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                off -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Self::Map(map)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Exp => y,
        UnaryKind::Ln => 1.0 / x,
        UnaryKind::Sqrt => 0.5 / y,
        UnaryKind::Square => 2.0 * x,
    }
}

fn axis_view(shape: &[usize], axis: usize) -> Result<AxisView> {
    if axis >= shape.len() {
        return Err(Error::Axis { axis, rank: shape.len() });
    }
    Ok(AxisView { outer: shape[..axis].iter().product(), len: shape[axis], inner: shape[axis + 1..].iter().product() })
}

/// Bilinear lookup of `points` (normalized `(x, y)` in `[0, 1]`, pixel-center
/// convention) on a channel-first `[C, H, W]` map, returning `[P, C]`.
/// Out-of-range coordinates are clamped to the border pixels.
pub fn bilinear_sample(tape: &mut Tape, map: Var, points: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 3 {
        return dim_err(format!("bilinear_sample expects [C,H,W], got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hwc = tape.permute(map, &[1, 2, 0])?;
    let hwc = tape.reshape(hwc, &[1, h, w, c])?;
    let p = tape.shape(points).to_vec();
    if p.len() != 2 || p[1] != 2 {
        return dim_err(format!("points must be [P,2], got {p:?}"));
    }
    let pts = tape.reshape(points, &[1, p[0], 2])?;
    let out = tape.bilinear(hwc, pts)?;
    tape.reshape(out, &[p[0], c])
}

impl Tape {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let ia = BroadcastIndex::build(&sa, &out_shape);
        let ib = BroadcastIndex::build(&sb, &out_shape);
        let (av, bv) = (self.data(a), self.data(b));
        let n = numel(&out_shape);
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let data: Vec<f64> = match (&ia, &ib) {
            (BroadcastIndex::Same, BroadcastIndex::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (BroadcastIndex::Same, BroadcastIndex::Modulo(m)) => av.chunks(*m).flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y))).collect(),
            (BroadcastIndex::Modulo(m), BroadcastIndex::Same) => bv.chunks(*m).flat_map(|row| av.iter().zip(row).map(|(&x, &y)| f(x, y))).collect(),
            (BroadcastIndex::Same, BroadcastIndex::Scalar) => av.iter().map(|&x| f(x, bv[0])).collect(),
            _ => (0..n).map(|i| f(av[ia.get(i)], bv[ib.get(i)])).collect(),
        };
        self.push("binary", out_shape, data, Op::Binary { kind, a, b, ia, ib }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Gelu => gelu,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Ln => f64::ln,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Square => |v| v * v,
        };
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("unary", shape, data, Op::Unary { kind, x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, data, Op::Affine { x, scale: s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, data, Op::Affine { x, scale: 1.0 }, &[x])
    }

    /// Batched matrix product. `a` is `[..., M, K]`; `b` is either a shared
    /// `[K, N]` matrix or carries the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if bt { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
        if k != bk {
            return dim_err(format!("matmul inner mismatch {sa:?} x {sb:?}"));
        }
        let lead = &sa[..sa.len() - 2];
        let b_batched = sb.len() > 2;
        if b_batched && sb[..sb.len() - 2] != *lead {
            return dim_err(format!("matmul batch mismatch {sa:?} x {sb:?}"));
        }
        let dims = MatmulDims { batch: numel(lead), m, k, n, b_batched, b_transposed: bt };
        let data = kernels::matmul_forward(self.data(a), self.data(b), dims);
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.push("matmul", shape, data, Op::Matmul { a, b, dims }, &[a, b])
    }

    /// `x · w + bias` over the last axis of `x`, with `w` shaped `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let view = axis_view(self.shape(x), axis)?;
        let xv = self.data(x);
        let mut out = vec![0.0; xv.len()];
        let AxisView { outer, len, inner } = view;
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len).map(|l| xv[base + l * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (xv[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    s += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= s;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax { x, view }, &[x])
    }

    fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let view = axis_view(&shape, axis)?;
        let xv = self.data(x);
        let AxisView { outer, len, inner } = view;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        if kind == ReduceKind::Mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("reduce", out_shape, out, Op::Reduce { kind, x, view }, &[x])
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    /// Population variance over `axis`, removing it.
    pub fn variance(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let view = axis_view(&shape, axis)?;
        let xv = self.data(x);
        let AxisView { outer, len, inner } = view;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let vals = (0..len).map(|l| xv[(o * len + l) * inner + i]);
                let mean = vals.clone().sum::<f64>() / len as f64;
                out[o * inner + i] = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("variance", out_shape, out, Op::Variance { x, view }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum_all", vec![1], vec![s], Op::ReduceAll { kind: ReduceKind::Sum, x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.data(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean_all", vec![1], vec![s], Op::ReduceAll { kind: ReduceKind::Mean, x }, &[x])
    }

    /// Element-wise maximum of two equally shaped tensors. The gradient goes
    /// to `a` on ties.
    pub fn max_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("max_elementwise shapes {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x.max(*y)).collect();
        let shape = self.shape(a).to_vec();
        self.push("max_elementwise", shape, data, Op::Maximum { a, b }, &[a, b])
    }

    /// Largest element (first on ties), as a scalar.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        let (index, v) = self.data(x).iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.push("max_all", vec![1], vec![v], Op::Extremum { x, index }, &[x])
    }

    /// Smallest element (first on ties), as a scalar.
    pub fn min_all(&mut self, x: Var) -> Result<Var> {
        let (index, v) = self.data(x).iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        self.push("min_all", vec![1], vec![v], Op::Extremum { x, index }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Axis { axis, rank: first.len() });
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut parts = Vec::with_capacity(xs.len());
        let mut cat_len = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return dim_err(format!("concat axis {axis}: {first:?} vs {s:?}"));
            }
            cat_len += s[axis];
            parts.push((x, s[axis] * inner));
        }
        let total = cat_len * inner;
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for &(x, chunk) in &parts {
                data.extend_from_slice(&self.data(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = cat_len;
        let parents: Vec<Var> = xs.to_vec();
        self.push("concat", shape, data, Op::Concat { parts, outer, total }, &parents)
    }

    /// `out[i] = x[index[i]]`, shaped `shape`. Backbone of every
    /// permute/slice/pad/repeat.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != index.len() {
            return dim_err(format!("gather shape {shape:?} != {} indices", index.len()));
        }
        let xv = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return dim_err(format!("gather index {bad} out of range {}", xv.len()));
        }
        let data = index.iter().map(|&i| xv[i]).collect();
        self.push("gather", shape, data, Op::Gather { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape(x)));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { x }, &[x])
    }

    pub fn permute(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if dims.len() != s.len() || dims.iter().any(|&d| d >= s.len() || std::mem::replace(&mut seen[d], true)) {
            return dim_err(format!("invalid permutation {dims:?} for {s:?}"));
        }
        let st = strides(&s);
        let out_shape: Vec<usize> = dims.iter().map(|&d| s[d]).collect();
        let out_strides: Vec<usize> = dims.iter().map(|&d| st[d]).collect();
        let index = odometer(&out_shape, &out_strides, 0);
        self.gather(x, index, out_shape)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Axis { axis, rank: s.len() });
        }
        if start + len > s[axis] || len == 0 {
            return dim_err(format!("narrow {start}+{len} out of extent {} on axis {axis}", s[axis]));
        }
        let st = strides(&s);
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let index = odometer(&out_shape, &st, start * st[axis]);
        self.gather(x, index, out_shape)
    }

    /// Replicate-pads the last two axes by `pad` on every side.
    pub fn pad_replicate2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return dim_err(format!("pad_replicate2d needs rank >= 2, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let lead: usize = s[..s.len() - 2].iter().product();
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut index = Vec::with_capacity(lead * hp * wp);
        for l in 0..lead {
            for y in 0..hp {
                let sy = y.saturating_sub(pad).min(h - 1);
                for xx in 0..wp {
                    let sx = xx.saturating_sub(pad).min(w - 1);
                    index.push(l * h * w + sy * w + sx);
                }
            }
        }
        let mut out_shape = s;
        let r = out_shape.len();
        out_shape[r - 2] = hp;
        out_shape[r - 1] = wp;
        self.gather(x, index, out_shape)
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::Dimension("layer_norm of rank-0".into()))?;
        let xv = self.data(x);
        let rows = xv.len() / len;
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * len..(r + 1) * len];
            let mean = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * len..(r + 1) * len].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push("layer_norm", shape, out, Op::LayerNorm { x, len, inv_std }, &[x])
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [Co, C, k, k]` (odd k),
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return dim_err(format!("conv2d expects rank-4 input and kernel, got {sx:?} and {sw:?}"));
        }
        let k = sw[2];
        if sw[3] != k || k % 2 == 0 {
            return dim_err(format!("conv2d kernel must be square with odd size, got {sw:?}"));
        }
        if sw[1] != sx[1] {
            return dim_err(format!("conv2d channel mismatch: input {sx:?}, kernel {sw:?}"));
        }
        if stride == 0 {
            return dim_err("conv2d stride must be >= 1");
        }
        let (h, wd) = (sx[2], sx[3]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return dim_err(format!("conv2d kernel {k} larger than padded input {sx:?}"));
        }
        let dims = ConvDims {
            n: sx[0],
            c_in: sx[1],
            h,
            w: wd,
            c_out: sw[0],
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (wd + 2 * padding - k) / stride + 1,
        };
        let data = kernels::conv2d_forward(self.data(x), self.data(w), dims);
        let shape = vec![dims.n, dims.c_out, dims.h_out, dims.w_out];
        self.push("conv2d", shape, data, Op::Conv2d { x, w, dims }, &[x, w])
    }

    /// Batched bilinear lookup on channel-last maps.
    ///
    /// `map` is `[B, H, W, C]`; `points` is `[B, P, 2]` holding normalized
    /// `(x, y)` with pixel centers at `(j + 0.5) / W`. Returns `[B, P, C]`.
    /// Coordinates outside the grid are clamped to the border pixels.
    pub fn bilinear(&mut self, map: Var, points: Var) -> Result<Var> {
        let (sm, sp) = (self.shape(map).to_vec(), self.shape(points).to_vec());
        if sm.len() != 4 || sp.len() != 3 || sp[2] != 2 || sp[0] != sm[0] {
            return dim_err(format!("bilinear expects [B,H,W,C] and [B,P,2], got {sm:?} and {sp:?}"));
        }
        let (batch, h, w, c, p) = (sm[0], sm[1], sm[2], sm[3], sp[1]);
        let data = kernels::bilinear_forward(self.data(map), self.data(points), batch, h, w, c, p);
        self.push("bilinear", vec![batch, p, c], data, Op::Bilinear { map, points, batch, h, w, c, p }, &[map, points])
    }

    /// Mean binary cross-entropy of `logits` against `targets` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != targets.len() {
            return dim_err(format!("bce: {} logits vs {} targets", z.len(), targets.len()));
        }
        let loss = z.iter().zip(targets).map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()).sum::<f64>() / z.len() as f64;
        self.push("bce_with_logits", vec![1], vec![loss], Op::BceWithLogits { logits, targets: targets.to_vec() }, &[logits])
    }
}

/// Source offsets for walking `shape` with the given source strides.
fn odometer(shape: &[usize], src_strides: &[usize], base: usize) -> Vec<usize> {
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut off = base;
    for _ in 0..total {
        out.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
