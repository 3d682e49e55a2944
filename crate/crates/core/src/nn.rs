//! Parameter containers shared by the generator and discriminator.
//!
//! Every container is generic over its parameter handle: `P = Tensor` holds
//! weights, `P = Var` holds the same weights bound into a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Uniform traversal over a container's parameters, in a fixed order.
pub trait ParamTree<P> {
    type Mapped<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q>;

    /// Pushes a mutable borrow of every parameter, in traversal order.
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>);

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        let mut all = Vec::new();
        self.collect_params_mut(prefix, &mut all);
        for (n, p) in all {
            f(&n, p);
        }
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        let _ = self.map_params(prefix, &mut |n, p| f(n, p));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal(0, σ) resampled until it falls inside ±2σ.
pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break v as f32;
        }
    })
}

/// All `(name, tensor)` pairs of a container.
pub fn named_tensors<M: ParamTree<Tensor>>(m: &M) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

pub fn param_count<M: ParamTree<Tensor>>(m: &M) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, t| n += t.numel());
    n
}

/// Binds every tensor into `g`, as trainable leaves or as constants.
pub fn bind<T: Scalar, M: ParamTree<Tensor>>(m: &M, g: &mut Graph<T>, trainable: bool) -> M::Mapped<Var> {
    m.map_params("", &mut |_, t| if trainable { g.param(t) } else { g.constant(t) })
}

/// Adds the graph gradients of `bound` into the matching tensors of `m`.
pub fn accumulate_grads<T: Scalar, M, B>(m: &mut M, g: &Graph<T>, bound: &B) -> Result<()>
where
    M: ParamTree<Tensor>,
    B: ParamTree<Var>,
{
    let mut vars = Vec::new();
    bound.visit_params("", &mut |_, v| vars.push(*v));
    let mut i = 0;
    let mut status = Ok(());
    m.visit_params_mut("", &mut |name, t| {
        let Some(&v) = vars.get(i) else {
            status = Err(Error::InvalidArgument(format!("no bound variable for {name}")));
            return;
        };
        i += 1;
        if status.is_err() {
            return;
        }
        let grad: Vec<f32> = match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f32()).collect(),
            None => vec![0.0; t.numel()],
        };
        status = t.accumulate_grad(&grad);
    });
    status
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P = Tensor> {
    /// `[in, out]`, applied as `x · weight`.
    pub weight: P,
    pub bias: P,
}

impl Linear<Tensor> {
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear { weight: truncated_normal(&[input, output], INIT_STD, rng), bias: Tensor::zeros(&[output]) }
    }

    pub fn zero(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.data_mut().fill(0.0);
    }
}

impl Linear<Var> {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_broadcast(y, self.bias)
    }
}

impl<P> ParamTree<P> for Linear<P> {
    type Mapped<Q> = Linear<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear { weight: f(&join(prefix, "weight"), &self.weight), bias: f(&join(prefix, "bias"), &self.bias) }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<P = Tensor> {
    pub gamma: P,
    pub beta: P,
}

impl LayerNorm<Tensor> {
    pub fn init(dim: usize) -> Self {
        LayerNorm { gamma: Tensor::full(&[dim], 1.0), beta: Tensor::zeros(&[dim]) }
    }
}

impl LayerNorm<Var> {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)
    }
}

impl<P> ParamTree<P> for LayerNorm<P> {
    type Mapped<Q> = LayerNorm<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LayerNorm<Q> {
        LayerNorm { gamma: f(&join(prefix, "gamma"), &self.gamma), beta: f(&join(prefix, "beta"), &self.beta) }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<P = Tensor> {
    pub norm1: LayerNorm<P>,
    pub qkv: Linear<P>,
    pub proj: Linear<P>,
    pub norm2: LayerNorm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

pub const MLP_RATIO: usize = 4;

impl Block<Tensor> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        Block {
            norm1: LayerNorm::init(dim),
            qkv: Linear::init(dim, 3 * dim, rng),
            proj: Linear::init(dim, dim, rng),
            norm2: LayerNorm::init(dim),
            fc1: Linear::init(dim, MLP_RATIO * dim, rng),
            fc2: Linear::init(MLP_RATIO * dim, dim, rng),
        }
    }

    /// Zeros both residual branches so the block is the identity map.
    pub fn zero_residual_branches(&mut self) {
        self.proj.zero();
        self.fc2.zero();
    }
}

impl Block<Var> {
    /// `x`: `[B, N, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
        let a = self.attention(g, x, heads)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }

    fn attention<T: Scalar>(&self, g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
        let &[b, n, d] = g.shape(x) else {
            return Err(crate::error::shape_err!("block input must be [B, N, D], got {:?}", g.shape(x)));
        };
        let dh = d / heads;
        let h = self.norm1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let qkv = g.reshape(qkv, &[b, n, 3, heads, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |g: &mut Graph<T>, i: usize| -> Result<Var> {
            let t = g.narrow(qkv, 0, i, 1)?;
            g.reshape(t, &[b, heads, n, dh])
        };
        let (q, k, v) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 3)?;
        let o = g.matmul(attn, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, n, d])?;
        self.proj.forward(g, o)
    }
}

impl<P> ParamTree<P> for Block<P> {
    type Mapped<Q> = Block<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Block<Q> {
        Block {
            norm1: self.norm1.map_params(&join(prefix, "norm1"), f),
            qkv: self.qkv.map_params(&join(prefix, "qkv"), f),
            proj: self.proj.map_params(&join(prefix, "proj"), f),
            norm2: self.norm2.map_params(&join(prefix, "norm2"), f),
            fc1: self.fc1.map_params(&join(prefix, "fc1"), f),
            fc2: self.fc2.map_params(&join(prefix, "fc2"), f),
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.norm1.collect_params_mut(&join(prefix, "norm1"), out);
        self.qkv.collect_params_mut(&join(prefix, "qkv"), out);
        self.proj.collect_params_mut(&join(prefix, "proj"), out);
        self.norm2.collect_params_mut(&join(prefix, "norm2"), out);
        self.fc1.collect_params_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_params_mut(&join(prefix, "fc2"), out);
    }
}

impl<P, M: ParamTree<P>> ParamTree<P> for Vec<M> {
    type Mapped<Q> = Vec<M::Mapped<Q>>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.iter().enumerate().map(|(i, m)| m.map_params(&join(prefix, &i.to_string()), f)).collect()
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.collect_params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = truncated_normal(&[10_000], INIT_STD, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn block_parameter_names_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Block::init(8, &mut rng);
        let names: Vec<String> = named_tensors(&b).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "norm1.gamma");
        assert_eq!(names[2], "qkv.weight");
        assert_eq!(names.len(), 12);
        assert_eq!(param_count(&b), 12 * 64 + 13 * 8);
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Block::init(8, &mut rng);
        b.zero_residual_branches();
        let mut g = Graph::<f32>::new();
        let bound = bind(&b, &mut g, false);
        let x = Tensor::from_fn(&[2, 3, 8], |i| (i as f32 * 0.37).sin());
        let xv = g.constant(&x);
        let y = bound.forward(&mut g, xv, 2).unwrap();
        assert!(g.to_tensor(y).bit_eq(&x));
    }
}
