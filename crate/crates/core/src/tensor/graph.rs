use std::cell::RefCell;

use super::kernels::{check_suffix, mm, mm_nt, mm_tn, softmax_rows};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Swap01(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ConcatLast(Vec<Var>),
    SliceLast(Var, usize, usize),
    Stack(Vec<Var>),
    Index0(Var, usize),
    Rotary(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded reverse-mode tape. Nodes are appended in evaluation
/// order, so the node list is already a topological order.
///
/// Methods take `&self` so that expressions can nest
/// (`g.scale(g.matmul(a, b)?, 0.5)?`).
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl Gradients {
    /// Gradient for `v`, zero-filled when no path reached it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rotary_angle(pos: usize, pair: usize, width: usize, base: f64) -> (f64, f64) {
    let theta = base.powf(-2.0 * pair as f64 / width as f64);
    (pos as f64 * theta).sin_cos()
}

/// Rotates consecutive channel pairs by a position-dependent angle; the
/// position is the index along the second-to-last axis. `sign = -1` applies
/// the inverse rotation.
fn rotate(data: &[f64], shape: &[usize], base: f64, sign: f64) -> Vec<f64> {
    let d = shape[shape.len() - 1];
    let s = shape[shape.len() - 2];
    let mut out = data.to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        let pos = r % s;
        for p in 0..d / 2 {
            let (sin, cos) = rotary_angle(pos, p, d, base);
            let sin = sign * sin;
            let (x0, x1) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = x0 * cos - x1 * sin;
            row[2 * p + 1] = x0 * sin + x1 * cos;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn emit(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        finite(op_name, &data)?;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parents);
        Ok(self.push(t, op, rg))
    }

    /// Records `t` as a leaf; gradient tracking follows `t.requires_grad()`.
    pub fn input(&self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = ta.dims2()?;
            let (k2, n) = tb.dims2()?;
            if k != k2 {
                return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
            }
            (vec![m, n], mm(ta.data(), tb.data(), m, k, n))
        };
        self.emit("matmul", shape, data, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::dim("bmm", format!("{:?} x {:?}", sa, sb)));
            }
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = Vec::with_capacity(bs * m * n);
            for i in 0..bs {
                out.extend(mm(
                    &ta.data()[i * m * k..(i + 1) * m * k],
                    &tb.data()[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            (vec![bs, m, n], out)
        };
        self.emit("bmm", shape, data, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            let (bs, m, n) = match s {
                [m, n] => (1, *m, *n),
                [b, m, n] => (*b, *m, *n),
                _ => return Err(Error::dim("transpose", format!("{:?}", s))),
            };
            let mut out = vec![0.0; t.len()];
            for b in 0..bs {
                let src = &t.data()[b * m * n..(b + 1) * m * n];
                let dst = &mut out[b * m * n..(b + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
            let mut shape = s.to_vec();
            let r = shape.len();
            shape.swap(r - 1, r - 2);
            (shape, out)
        };
        self.emit("transpose", shape, data, Op::Transpose(a), &[a])
    }

    /// `[A×B×C] → [B×A×C]`
    pub fn swap01(&self, a: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let &[p, q, c] = t.shape() else {
                return Err(Error::dim("swap01", format!("{:?}", t.shape())));
            };
            (vec![q, p, c], swap01_data(t.data(), p, q, c))
        };
        self.emit("swap01", shape, data, Op::Swap01(a), &[a])
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let data = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if shape.iter().product::<usize>() != t.len() {
                return Err(Error::dim("reshape", format!("{:?} -> {:?}", t.shape(), shape)));
            }
            t.data().to_vec()
        };
        self.emit("reshape", shape, data, Op::Reshape(a), &[a])
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(name, ta, tb)?;
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            (ta.shape().to_vec(), data)
        };
        self.emit(name, shape, data, op, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn bcast(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            check_suffix(name, ta.shape(), tb.shape())?;
            let bl = tb.len();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % bl]))
                .collect();
            (ta.shape().to_vec(), data)
        };
        self.emit(name, shape, data, op, &[a, b])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, per-token
    /// conditioning, modulation shift).
    pub fn add_bcast(&self, a: Var, b: Var) -> Result<Var> {
        self.bcast("add_bcast", a, b, |x, y| x + y, Op::AddBcast(a, b))
    }

    /// `a ⊙ b` with suffix broadcasting of `b`.
    pub fn mul_bcast(&self, a: Var, b: Var) -> Result<Var> {
        self.bcast("mul_bcast", a, b, |x, y| x * y, Op::MulBcast(a, b))
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            (t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        };
        self.emit(name, shape, data, op, &[a])
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x / (1.0 + (-x).exp()), Op::Silu(a))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.with_value(a, |t| t.data().iter().sum::<f64>());
        self.emit("sum", vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (s, n) = self.with_value(a, |t| (t.data().iter().sum::<f64>(), t.len()));
        if n == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        self.emit("mean", vec![], vec![s / n as f64], Op::Mean(a), &[a])
    }

    /// Softmax over the last axis; `mask` is an additive constant whose shape
    /// is a suffix of the logits shape.
    pub fn masked_softmax(&self, logits: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            if let Some(m) = mask {
                check_suffix("masked_softmax", t.shape(), m.shape())?;
            }
            let data = softmax_rows(t.data(), mask.map(|m| m.data()), t.last_dim())?;
            (t.shape().to_vec(), data)
        };
        self.emit("masked_softmax", shape, data, Op::Softmax(logits), &[logits])
    }

    pub fn softmax(&self, logits: Var) -> Result<Var> {
        self.masked_softmax(logits, None)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let (shape, data, rstd) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let d = t.last_dim();
            let mut out = vec![0.0; t.len()];
            let mut rstd = Vec::with_capacity(t.len() / d.max(1));
            for (row, orow) in t.data().chunks(d).zip(out.chunks_mut(d)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
                let r = 1.0 / (var + eps).sqrt();
                for (o, x) in orow.iter_mut().zip(row) {
                    *o = (x - mean) * r;
                }
                rstd.push(r);
            }
            (t.shape().to_vec(), out, rstd)
        };
        self.emit("layer_norm", shape, data, Op::LayerNorm(a, rstd), &[a])
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (m, n) = t.dims2()?;
            let mut out = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                if i >= m {
                    return Err(Error::Index { index: i, len: m });
                }
                out.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
            (vec![idx.len(), n], out)
        };
        self.emit("gather_rows", shape, data, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&self, parts: &[Var]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::dim("concat_last", "no inputs"))?;
            let lead = {
                let s = nodes[first.0].value.shape();
                s[..s.len().saturating_sub(1)].to_vec()
            };
            let rows: usize = lead.iter().product();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.is_empty() || s[..s.len() - 1] != *lead {
                    return Err(Error::dim("concat_last", format!("{:?} vs lead {:?}", s, lead)));
                }
                widths.push(s[s.len() - 1]);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead;
            shape.push(total);
            (shape, out)
        };
        self.emit("concat_last", shape, data, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let d = t.last_dim();
            if start > end || end > d || t.shape().is_empty() {
                return Err(Error::dim("slice_last", format!("[{start},{end}) of {d}")));
            }
            let mut out = Vec::with_capacity(t.len() / d.max(1) * (end - start));
            for row in t.data().chunks(d) {
                out.extend_from_slice(&row[start..end]);
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = end - start;
            (shape, out)
        };
        self.emit("slice_last", shape, data, Op::SliceLast(a, start, end), &[a])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| Error::dim("stack", "no inputs"))?;
            let inner = nodes[first.0].value.shape().to_vec();
            let mut out = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape() != inner.as_slice() {
                    return Err(Error::dim("stack", format!("{:?} vs {:?}", t.shape(), inner)));
                }
                out.extend_from_slice(t.data());
            }
            let mut shape = vec![parts.len()];
            shape.extend(inner);
            (shape, out)
        };
        self.emit("stack", shape, data, Op::Stack(parts.to_vec()), parts)
    }

    /// `a[i]` along the leading axis.
    pub fn index0(&self, a: Var, i: usize) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.is_empty() || i >= s[0] {
                return Err(Error::dim("index0", format!("index {i} of {:?}", s)));
            }
            let inner: usize = s[1..].iter().product();
            (s[1..].to_vec(), t.data()[i * inner..(i + 1) * inner].to_vec())
        };
        self.emit("index0", shape, data, Op::Index0(a, i), &[a])
    }

    /// Rotary position embedding: channel pairs `(2p, 2p+1)` are rotated by
    /// `pos · base^(-2p/d)`, where `pos` is the index along the second-to-last
    /// axis and `d` the (even) last-axis width.
    pub fn rotary(&self, a: Var, base: f64) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.len() < 2 || !s[s.len() - 1].is_multiple_of(2) {
                return Err(Error::dim("rotary", format!("needs even last axis, got {:?}", s)));
            }
            (s.to_vec(), rotate(t.data(), s, base, 1.0))
        };
        self.emit("rotary", shape, data, Op::Rotary(a, base), &[a])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            visited += 1;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            let out = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, contrib: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(g) => g.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let n = val(*b).shape()[1];
                    acc(*a, mm_nt(&gout, val(*b).data(), m, n, k));
                    acc(*b, mm_tn(val(*a).data(), &gout, k, m, n));
                }
                Op::BatchMatMul(a, b) => {
                    let sa = val(*a).shape();
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], val(*b).shape()[2]);
                    let (da, db) = (val(*a).data(), val(*b).data());
                    let mut ga = Vec::with_capacity(bs * m * k);
                    let mut gb = Vec::with_capacity(bs * k * n);
                    for t in 0..bs {
                        let g = &gout[t * m * n..(t + 1) * m * n];
                        ga.extend(mm_nt(g, &db[t * k * n..(t + 1) * k * n], m, n, k));
                        gb.extend(mm_tn(&da[t * m * k..(t + 1) * m * k], g, k, m, n));
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Transpose(a) => {
                    let s = out.shape();
                    let r = s.len();
                    let (m, n) = (s[r - 2], s[r - 1]);
                    let bs = out.len() / (m * n).max(1);
                    let mut g = vec![0.0; gout.len()];
                    for b in 0..bs {
                        for i in 0..m {
                            for j in 0..n {
                                g[b * m * n + j * m + i] = gout[b * m * n + i * n + j];
                            }
                        }
                    }
                    acc(*a, g);
                }
                Op::Swap01(a) => {
                    let s = out.shape();
                    acc(*a, swap01_data(&gout, s[0], s[1], s[2]));
                }
                Op::Reshape(a) => acc(*a, gout),
                Op::Add(a, b) => {
                    acc(*a, gout.clone());
                    acc(*b, gout);
                }
                Op::Sub(a, b) => {
                    acc(*b, gout.iter().map(|g| -g).collect());
                    acc(*a, gout);
                }
                Op::Mul(a, b) => {
                    let (da, db) = (val(*a).data(), val(*b).data());
                    acc(*a, gout.iter().zip(db).map(|(g, y)| g * y).collect());
                    acc(*b, gout.iter().zip(da).map(|(g, x)| g * x).collect());
                }
                Op::AddBcast(a, b) => {
                    let bl = val(*b).len();
                    let mut gb = vec![0.0; bl];
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % bl] += g;
                    }
                    acc(*b, gb);
                    acc(*a, gout);
                }
                Op::MulBcast(a, b) => {
                    let (da, db) = (val(*a).data(), val(*b).data());
                    let bl = db.len();
                    let mut gb = vec![0.0; bl];
                    let mut ga = vec![0.0; da.len()];
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % bl] += g * da[i];
                        ga[i] = g * db[i % bl];
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, s) => acc(*a, gout.iter().map(|g| g * s).collect()),
                Op::AddScalar(a) => acc(*a, gout),
                Op::Exp(a) => acc(*a, gout.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
                Op::Silu(a) => {
                    let g = gout
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    acc(*a, g);
                }
                Op::Square(a) => {
                    acc(*a, gout.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect())
                }
                Op::Sum(a) => acc(*a, vec![gout[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    acc(*a, vec![gout[0] / n as f64; n]);
                }
                Op::Softmax(a) => {
                    let d = out.last_dim();
                    let mut g = vec![0.0; gout.len()];
                    for ((y, gy), gx) in out.data().chunks(d).zip(gout.chunks(d)).zip(g.chunks_mut(d)) {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[j] = y[j] * (gy[j] - dot);
                        }
                    }
                    acc(*a, g);
                }
                Op::LayerNorm(a, rstd) => {
                    let d = out.last_dim();
                    let mut g = vec![0.0; gout.len()];
                    for (r, ((y, gy), gx)) in out
                        .data()
                        .chunks(d)
                        .zip(gout.chunks(d))
                        .zip(g.chunks_mut(d))
                        .enumerate()
                    {
                        let mg = gy.iter().sum::<f64>() / d as f64;
                        let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[j] = rstd[r] * (gy[j] - mg - y[j] * mgy);
                        }
                    }
                    acc(*a, g);
                }
                Op::GatherRows(a, idx) => {
                    let n = out.shape()[1];
                    let mut g = vec![0.0; val(*a).len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            g[i * n + j] += gout[r * n + j];
                        }
                    }
                    acc(*a, g);
                }
                Op::ConcatLast(parts) => {
                    let total = out.last_dim();
                    let rows = out.len() / total.max(1);
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).last_dim();
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&gout[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        acc(*p, g);
                    }
                }
                Op::SliceLast(a, start, end) => {
                    let d = val(*a).last_dim();
                    let w = end - start;
                    let mut g = vec![0.0; val(*a).len()];
                    if w > 0 {
                        for (r, row) in gout.chunks(w).enumerate() {
                            g[r * d + start..r * d + end].copy_from_slice(row);
                        }
                    }
                    acc(*a, g);
                }
                Op::Stack(parts) => {
                    let inner = out.len() / parts.len();
                    for (k, p) in parts.iter().enumerate() {
                        acc(*p, gout[k * inner..(k + 1) * inner].to_vec());
                    }
                }
                Op::Index0(a, i) => {
                    let inner = out.len();
                    let mut g = vec![0.0; val(*a).len()];
                    g[i * inner..(i + 1) * inner].copy_from_slice(&gout);
                    acc(*a, g);
                }
                Op::Rotary(a, base) => acc(*a, rotate(&gout, out.shape(), *base, -1.0)),
            }
        }

        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }
}

fn swap01_data(data: &[f64], p: usize, q: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..p {
        for j in 0..q {
            let src = (i * q + j) * c;
            let dst = (j * p + i) * c;
            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
        }
    }
    out
}
