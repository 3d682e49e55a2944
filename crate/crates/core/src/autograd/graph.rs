//! Define-by-run tape: every op appends a node holding its value, and
//! [`Graph::backward`] walks the tape once in reverse.

use super::scalar::{gemm, Layout, Scalar};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, shared_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast { x: usize, y: usize },
    Scale { x: usize, c: T },
    Affine { x: usize, a: T },
    Sum(usize),
    Mean(usize),
    Square(usize),
    Softmax { x: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(usize),
    LeakyRelu { x: usize, slope: T },
    Sigmoid(usize),
    Log(usize),
    Clamp { x: usize, lo: T, hi: T },
    Gather { x: usize, index: Vec<usize> },
    Concat { a: usize, b: usize, outer: usize, la: usize, lb: usize, inner: usize },
    Reshape(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Scale { .. } => "scale",
            Op::Affine { .. } => "affine",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    leaf_grad: Option<Vec<T>>,
}

/// Names of every differentiable op the tape records.
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_broadcast",
    "scale",
    "affine",
    "sum",
    "mean",
    "square",
    "softmax",
    "layer_norm",
    "gelu",
    "leaky_relu",
    "sigmoid",
    "log",
    "clamp",
    "gather",
    "concat",
    "reshape",
];

const GELU_COEF: f64 = 0.044715;

fn gelu_scale<T: Scalar>() -> T {
    T::of_f64((2.0 / std::f64::consts::PI).sqrt())
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    corrupt: Option<&'static str>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), corrupt: None }
    }

    /// Test hook: scales the backward contribution of every `op` node by 1.5.
    pub fn corrupt_backward(&mut self, op: &str) {
        self.corrupt = OP_NAMES.iter().copied().find(|n| *n == op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad, leaf_grad: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- leaves ----

    /// Leaf that tracks gradients iff `t.requires_grad()`.
    pub fn tensor(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| T::of_f32(v)).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, t.requires_grad())
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| T::of_f32(v)).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| T::of_f32(v)).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, false)
    }

    pub fn leaf_raw(&mut self, shape: &[usize], value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() || shape.contains(&0) {
            return Err(shape_err!("shape {shape:?} needs {} values, got {}", numel(shape), value.len()));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    // ---- accessors ----

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        let data = n.value.iter().map(|x| x.as_f32()).collect();
        Tensor::new(n.shape.clone(), data).expect("graph nodes have consistent shapes")
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).leaf_grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.node(v).value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    // ---- linear algebra ----

    /// `a[..., m, k] · b[k, n]` (shared rhs) or `a[..., m, k] · b[..., k, n]`
    /// with identical leading batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || shape_err!("matmul of {sa:?} and {sb:?}");
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(err());
        }
        let batch = numel(lead_a);
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        if shared_b {
            gemm(batch * m, k, n, va, Layout::row_major(k), vb, Layout::row_major(n), T::zero(), &mut out);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..],
                    Layout::row_major(k),
                    &vb[i * k * n..],
                    Layout::row_major(n),
                    T::zero(),
                    &mut out[i * m * n..],
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::MatMul { a: a.0, b: b.0, shared_b, batch, m, k, n }, ng))
    }

    // ---- elementwise binary ----

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{op} of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out = self.node(a).value.iter().zip(&self.node(b).value).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s (bias, positional tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sy = self.shape(y);
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(shape_err!("cannot broadcast {sy:?} onto {sx:?}"));
        }
        let vy = &self.node(y).value;
        let ly = vy.len();
        let out = self.node(x).value.iter().enumerate().map(|(i, &v)| v + vy[i % ly]).collect();
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBroadcast { x: x.0, y: y.0 }, ng))
    }

    // ---- elementwise unary ----

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.node(x).value.iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        self.map(x, Op::Scale { x: x.0, c }, |v| v * c)
    }

    /// `a·x + b`, elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (a, b) = (T::of_f64(a), T::of_f64(b));
        self.map(x, Op::Affine { x: x.0, a }, |v| a * v + b)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x.0), |v| v * v)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = gelu_scale::<T>();
        let k = T::of_f64(GELU_COEF);
        let half = T::of_f64(0.5);
        self.map(x, Op::Gelu(x.0), |v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of_f64(slope);
        self.map(x, Op::LeakyRelu { x: x.0, slope: s }, |v| if v > T::zero() { v } else { s * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x.0), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    /// Natural logarithm.
    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x.0), |v| v.ln())
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of_f64(lo), T::of_f64(hi));
        self.map(x, Op::Clamp { x: x.0, lo, hi }, |v| v.max(lo).min(hi))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x.0), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.node(x).value;
        let s: T = v.iter().copied().sum();
        let m = s / T::from_usize(v.len()).unwrap();
        let ng = self.ng(x);
        self.push(vec![1], vec![m], Op::Mean(x.0), ng)
    }

    // ---- normalization ----

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let v = &self.node(x).value;
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| v[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (v[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Softmax { x: x.0, len, inner }, ng))
    }

    /// Normalizes over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!(
                "layer_norm of {shape:?} with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = T::of_f64(eps);
        let dn = T::from_usize(d).unwrap();
        let v = &self.node(x).value;
        let g = &self.node(gamma).value;
        let b = &self.node(beta).value;
        let rows = v.len() / d;
        let mut xhat = vec![T::zero(); v.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&u| (u - mean) * (u - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(shape, out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd }, ng))
    }

    // ---- data movement ----

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(shape_err!("gather of {} indices into shape {shape:?}", index.len()));
        }
        let v = &self.node(x).value;
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return Err(shape_err!("gather index {bad} out of range for {:?}", self.shape(x)));
        }
        let out = index.iter().map(|&i| v[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), out, Op::Gather { x: x.0, index }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.node(x).value.len() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape(x)));
        }
        let out = self.node(x).value.clone();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x.0), ng))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("invalid permutation {axes:?} for {shape:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut in_strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = numel(&shape);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..total {
            index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(x, index, &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err!("transpose needs rank ≥ 2, got {:?}", self.shape(x)));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!("narrow({axis}, {start}, {len}) of {shape:?}"));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            index.extend(base + start * inner..base + (start + len) * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, index, &out_shape)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err!("concat of {sa:?} and {sb:?} along axis {axis}"));
        }
        let inner: usize = sa[axis + 1..].iter().product();
        let outer: usize = sa[..axis].iter().product();
        let (la, lb) = (sa[axis], sb[axis]);
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            out.extend_from_slice(&va[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&vb[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::Concat { a: a.0, b: b.0, outer, la, lb, inner }, ng))
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.ng(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.leaf_grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    None => node.leaf_grad = Some(g),
                }
                continue;
            }
            let mut parts = self.local_backward(i, &g);
            if self.corrupt == Some(self.nodes[i].op.name()) {
                let f = T::of_f64(1.5);
                parts.iter_mut().for_each(|(_, p)| p.iter_mut().for_each(|v| *v *= f));
            }
            for (input, part) in parts {
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(part),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs that need them.
    fn local_backward(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let want = |j: usize| self.nodes[j].needs_grad;
        let mut parts = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, shared_b, batch, m, k, n } => {
                let (va, vb) = (val(a), val(b));
                if want(a) {
                    let mut da = vec![T::zero(); va.len()];
                    if shared_b {
                        gemm(batch * m, n, k, g, Layout::row_major(n), vb, Layout::transposed(n), T::zero(), &mut da);
                    } else {
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..],
                                Layout::row_major(n),
                                &vb[t * k * n..],
                                Layout::transposed(n),
                                T::zero(),
                                &mut da[t * m * k..],
                            );
                        }
                    }
                    parts.push((a, da));
                }
                if want(b) {
                    let mut db = vec![T::zero(); vb.len()];
                    if shared_b {
                        gemm(k, batch * m, n, va, Layout::transposed(k), g, Layout::row_major(n), T::zero(), &mut db);
                    } else {
                        for t in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &va[t * m * k..],
                                Layout::transposed(k),
                                &g[t * m * n..],
                                Layout::row_major(n),
                                T::zero(),
                                &mut db[t * k * n..],
                            );
                        }
                    }
                    parts.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                if want(a) {
                    parts.push((a, g.to_vec()));
                }
                if want(b) {
                    parts.push((b, g.to_vec()));
                }
            }
            &Op::Sub(a, b) => {
                if want(a) {
                    parts.push((a, g.to_vec()));
                }
                if want(b) {
                    parts.push((b, g.iter().map(|&v| -v).collect()));
                }
            }
            &Op::Mul(a, b) => {
                if want(a) {
                    parts.push((a, g.iter().zip(val(b)).map(|(&d, &y)| d * y).collect()));
                }
                if want(b) {
                    parts.push((b, g.iter().zip(val(a)).map(|(&d, &x)| d * x).collect()));
                }
            }
            &Op::AddBroadcast { x, y } => {
                if want(x) {
                    parts.push((x, g.to_vec()));
                }
                if want(y) {
                    let ly = val(y).len();
                    let mut dy = vec![T::zero(); ly];
                    for chunk in g.chunks(ly) {
                        dy.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                    }
                    parts.push((y, dy));
                }
            }
            &Op::Scale { x, c } => {
                if want(x) {
                    parts.push((x, g.iter().map(|&v| v * c).collect()));
                }
            }
            &Op::Affine { x, a } => {
                if want(x) {
                    parts.push((x, g.iter().map(|&v| v * a).collect()));
                }
            }
            &Op::Sum(x) => {
                if want(x) {
                    parts.push((x, vec![g[0]; val(x).len()]));
                }
            }
            &Op::Mean(x) => {
                if want(x) {
                    let n = val(x).len();
                    parts.push((x, vec![g[0] / T::from_usize(n).unwrap(); n]));
                }
            }
            &Op::Square(x) => {
                if want(x) {
                    let two = T::of_f64(2.0);
                    parts.push((x, g.iter().zip(val(x)).map(|(&d, &v)| two * v * d).collect()));
                }
            }
            &Op::Softmax { x, len, inner } => {
                if want(x) {
                    let y = &node.value;
                    let mut dx = vec![T::zero(); y.len()];
                    let outer = y.len() / (len * inner);
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dot: T = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    parts.push((x, dx));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = val(gamma).len();
                let gv = val(gamma);
                if want(x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (gr, xh) = (&g[row.clone()], &xhat[row.clone()]);
                        let dxh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_d = dxh.iter().copied().sum::<T>() / dn;
                        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            dx[r * d + j] = rs * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    parts.push((x, dx));
                }
                if want(gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        dg.iter_mut().zip(gr.iter().zip(xh)).for_each(|(a, (&u, &v))| *a += u * v);
                    }
                    parts.push((gamma, dg));
                }
                if want(beta) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, &u)| *a += u);
                    }
                    parts.push((beta, db));
                }
            }
            &Op::Gelu(x) => {
                if want(x) {
                    let c = gelu_scale::<T>();
                    let k = T::of_f64(GELU_COEF);
                    let half = T::of_f64(0.5);
                    let three = T::of_f64(3.0);
                    let dx = g
                        .iter()
                        .zip(val(x))
                        .map(|(&d, &v)| {
                            let t = (c * (v + k * v * v * v)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                            d * (half * (T::one() + t) + half * v * dt)
                        })
                        .collect();
                    parts.push((x, dx));
                }
            }
            &Op::LeakyRelu { x, slope } => {
                if want(x) {
                    let dx = g.iter().zip(val(x)).map(|(&d, &v)| if v > T::zero() { d } else { d * slope }).collect();
                    parts.push((x, dx));
                }
            }
            &Op::Sigmoid(x) => {
                if want(x) {
                    let dx = g.iter().zip(&node.value).map(|(&d, &y)| d * y * (T::one() - y)).collect();
                    parts.push((x, dx));
                }
            }
            &Op::Log(x) => {
                if want(x) {
                    parts.push((x, g.iter().zip(val(x)).map(|(&d, &v)| d / v).collect()));
                }
            }
            &Op::Clamp { x, lo, hi } => {
                if want(x) {
                    let dx = g
                        .iter()
                        .zip(val(x))
                        .map(|(&d, &v)| if v >= lo && v <= hi { d } else { T::zero() })
                        .collect();
                    parts.push((x, dx));
                }
            }
            Op::Gather { x, index } => {
                if want(*x) {
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for (&j, &d) in index.iter().zip(g) {
                        dx[j] += d;
                    }
                    parts.push((*x, dx));
                }
            }
            &Op::Concat { a, b, outer, la, lb, inner } => {
                let step = (la + lb) * inner;
                if want(a) {
                    let mut da = Vec::with_capacity(outer * la * inner);
                    for o in 0..outer {
                        da.extend_from_slice(&g[o * step..o * step + la * inner]);
                    }
                    parts.push((a, da));
                }
                if want(b) {
                    let mut db = Vec::with_capacity(outer * lb * inner);
                    for o in 0..outer {
                        db.extend_from_slice(&g[o * step + la * inner..(o + 1) * step]);
                    }
                    parts.push((b, db));
                }
            }
            &Op::Reshape(x) => {
                if want(x) {
                    parts.push((x, g.to_vec()));
                }
            }
        }
        parts
    }
}
