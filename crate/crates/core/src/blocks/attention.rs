//! Multi-head self-attention over the `H·W` spatial tokens of a feature map.

use rand::Rng;

use super::layers::{join, pointwise, Conv, RepConv};
use super::{LayerMut, LayerRef, Layers, ScaleMode};
use crate::error::{Error, Result};
use crate::tensor::{Backend, ConvSpec, Eager, Tensor};

/// Scaled dot-product attention on head-split tokens.
///
/// `q`, `k`, `v` are `(N, heads, head_dim, M)`; the result has the same
/// layout. Scores are `qᵀk` per head, softmax runs over keys.
pub fn attend<B: Backend>(
    b: &mut B,
    path: &str,
    q: &B::Value,
    k: &B::Value,
    v: &B::Value,
    scale: f64,
) -> Result<(B::Value, B::Value)> {
    let mut scores = b.matmul(&join(path, "scores"), q, k, true, false)?;
    if scale != 1.0 {
        scores = b.scale(&scores, scale)?;
    }
    let attn = b.softmax_lastdim(&scores)?;
    let out = b.matmul(&join(path, "mix"), v, &attn, false, true)?;
    Ok((out, attn))
}

fn split_heads<B: Backend>(b: &mut B, x: &B::Value, heads: usize) -> Result<B::Value> {
    let [n, c, h, w] = b.dims(x);
    b.reshape(x, [n, heads, c / heads, h * w])
}

fn check_heads(dim: usize, head_dim: usize) -> Result<usize> {
    if head_dim == 0 || dim % head_dim != 0 {
        return Err(Error::Config(format!(
            "attention width {dim} is not divisible by head dim {head_dim}"
        )));
    }
    Ok(dim / head_dim)
}

/// Attention with one shared projection: `Softmax(X (XW)ᵀ) XW` per head.
///
/// `proj` is a bias-free 1×1 bundle realising `W`; the queries are the raw
/// input tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Rlmhsa {
    pub dim: usize,
    pub head_dim: usize,
    pub scale_mode: ScaleMode,
    pub proj: RepConv,
}

impl Rlmhsa {
    pub fn new(
        dim: usize,
        head_dim: usize,
        scale_mode: ScaleMode,
        extra_groups: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(dim, head_dim)?;
        Ok(Self {
            dim,
            head_dim,
            scale_mode,
            proj: pointwise(dim, dim, extra_groups, false, rng)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.dim / self.head_dim
    }

    fn run<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<(B::Value, B::Value)> {
        let dims = b.dims(x);
        if dims[1] != self.dim {
            return Err(Error::Shape {
                op: "rlmhsa",
                detail: format!("input has {} channels, expected {}", dims[1], self.dim),
            });
        }
        let y = self.proj.forward(b, &join(path, "proj"), x)?;
        let heads = self.heads();
        let xt = split_heads(b, x, heads)?;
        let yt = split_heads(b, &y, heads)?;
        let (out, attn) = attend(b, path, &xt, &yt, &yt, self.scale_mode.factor(self.head_dim))?;
        Ok((b.reshape(&out, dims)?, attn))
    }

    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        Ok(self.run(b, path, x)?.0)
    }

    /// Attention weights `(N, heads, M, M)` for an input map.
    pub fn attention_matrix(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(&mut Eager::<f32>::inference(), "attn", x)?.1)
    }
}

/// Conventional attention with separate bias-free q, k, v 1×1 projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Mhsa {
    pub dim: usize,
    pub head_dim: usize,
    pub scale_mode: ScaleMode,
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
}

impl Mhsa {
    pub fn new(dim: usize, head_dim: usize, scale_mode: ScaleMode, rng: &mut impl Rng) -> Result<Self> {
        check_heads(dim, head_dim)?;
        let spec = ConvSpec::new(dim, dim, 1);
        Ok(Self {
            dim,
            head_dim,
            scale_mode,
            q: Conv::kaiming(spec, rng),
            k: Conv::kaiming(spec, rng),
            v: Conv::kaiming(spec, rng),
        })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        let dims = b.dims(x);
        let heads = self.dim / self.head_dim;
        let q = self.q.forward(b, &join(path, "q"), x)?;
        let k = self.k.forward(b, &join(path, "k"), x)?;
        let v = self.v.forward(b, &join(path, "v"), x)?;
        let (q, k, v) = (split_heads(b, &q, heads)?, split_heads(b, &k, heads)?, split_heads(b, &v, heads)?);
        let (out, _) = attend(b, path, &q, &k, &v, self.scale_mode.factor(self.head_dim))?;
        b.reshape(&out, dims)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    Shared(Rlmhsa),
    Standard(Mhsa),
}

impl Attention {
    pub fn forward<B: Backend>(&self, b: &mut B, path: &str, x: &B::Value) -> Result<B::Value> {
        match self {
            Attention::Shared(a) => a.forward(b, path, x),
            Attention::Standard(a) => a.forward(b, path, x),
        }
    }

    /// Weights of the attention projections (deployed count).
    pub fn projection_params(&self) -> usize {
        match self {
            Attention::Shared(a) => a.dim * a.dim,
            Attention::Standard(a) => a.q.param_count() + a.k.param_count() + a.v.param_count(),
        }
    }
}

impl Layers for Attention {
    fn walk(&self, path: &str, f: &mut dyn FnMut(&str, LayerRef<'_>)) {
        match self {
            Attention::Shared(a) => f(&join(path, "proj"), LayerRef::Rep(&a.proj)),
            Attention::Standard(a) => {
                f(&join(path, "q"), LayerRef::Conv(&a.q));
                f(&join(path, "k"), LayerRef::Conv(&a.k));
                f(&join(path, "v"), LayerRef::Conv(&a.v));
            }
        }
    }

    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, LayerMut<'_>)) {
        match self {
            Attention::Shared(a) => f(&join(path, "proj"), LayerMut::Rep(&mut a.proj)),
            Attention::Standard(a) => {
                f(&join(path, "q"), LayerMut::Conv(&mut a.q));
                f(&join(path, "k"), LayerMut::Conv(&mut a.k));
                f(&join(path, "v"), LayerMut::Conv(&mut a.v));
            }
        }
    }
}
