//! Layers shared by the video front-ends, the encoders and the transducer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal initializer for projections.
pub const INIT_STD: f64 = 0.02;

/// Variance-preserving std for a map with `fan_in` inputs.
pub fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    pub fn apply<'t>(self, x: &Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Swish => x.silu(),
        }
    }
}

/// Affine map on the last axis: `x·W + b`, `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::with_std(store, name, in_dim, out_dim, INIT_STD, rng)
    }

    /// Weights with std `1/√in_dim`.
    pub fn fan_in<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::with_std(store, name, in_dim, out_dim, fan_in_std(in_dim), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.trunc_normal(format!("{name}.w"), &[in_dim, out_dim], std, rng);
        let b = store.zeros(format!("{name}.b"), &[out_dim]);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let last = *shape.last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(Error::dim("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let rows = shape.iter().product::<usize>() / last.max(1);
        let flat = if shape.len() == 2 { *x } else { x.reshape([rows, last])? };
        let y = flat.matmul(&self.w.of(p))?.add_broadcast(&self.b.of(p))?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(out_shape)
    }

    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.in_dim * self.out_dim) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&self.gain.of(p), &self.bias.of(p), LN_EPS)
    }
}

/// Two-layer position-wise feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
            activation,
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.activation.apply(&self.up.forward(p, x)?);
        self.down.forward(p, &h)
    }

    pub fn flops(&self, rows: usize) -> u64 {
        self.up.flops(rows) + self.down.flops(rows)
    }
}

/// Positional terms entering the attention logits.
pub enum PositionTerms<'t> {
    None,
    /// Additive logit bias `[heads, N, N]`, shared over the batch.
    Bias(Var<'t>),
    /// Relative embeddings gathered per query/key pair, each `[N, N, dim]`:
    /// `key` is dotted with the query, `value` is mixed into the context.
    Embeddings { key: Var<'t>, value: Var<'t> },
}

/// Multi-head scaled dot-product self-attention over the middle axis of `[B, N, D]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &[Var<'t>],
        x: &Var<'t>,
        pos: &PositionTerms<'t>,
        mask: Option<&Var<'t>>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(p, x, pos, mask)?.0)
    }

    /// Also returns the attention weights `[B·heads, N, N]`.
    pub fn forward_with_weights<'t>(
        &self,
        p: &[Var<'t>],
        x: &Var<'t>,
        pos: &PositionTerms<'t>,
        mask: Option<&Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::dim("attention", &shape, &[self.dim]));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let x2 = x.reshape([b * n, d])?;
        let split = |lin: &Linear| -> Result<Var<'t>> { lin.forward(p, &x2)?.reshape([b, n, h, dh]) };
        let q4 = split(&self.query)?.permute(&[0, 2, 1, 3])?; // [B,H,N,dh]
        let k = split(&self.key)?.permute(&[0, 2, 3, 1])?.reshape([b * h, dh, n])?;
        let v = split(&self.value)?.permute(&[0, 2, 1, 3])?.reshape([b * h, n, dh])?;
        let q = q4.reshape([b * h, n, dh])?;

        let mut scores = q.bmm(&k)?;
        if let PositionTerms::Embeddings { key, .. } = pos {
            let qq = q4.permute(&[1, 2, 0, 3])?.reshape([h * n, b, dh])?;
            let rk = key.reshape([n, n, h, dh])?.permute(&[2, 0, 3, 1])?.reshape([h * n, dh, n])?;
            let rel = qq.bmm(&rk)?.reshape([h, n, b, n])?.permute(&[2, 0, 1, 3])?.reshape([b * h, n, n])?;
            scores = scores.add(&rel)?;
        }
        scores = scores.scale(1.0 / (dh as f64).sqrt());
        if let PositionTerms::Bias(bias) = pos {
            scores = scores.reshape([b, h, n, n])?.add_broadcast(bias)?.reshape([b * h, n, n])?;
        }
        if let Some(m) = mask {
            scores = scores.add_broadcast(m)?;
        }
        let attn = scores.softmax()?;
        let mut ctx = attn.bmm(&v)?;
        if let PositionTerms::Embeddings { value, .. } = pos {
            let aa = attn.reshape([b, h, n, n])?.permute(&[1, 2, 0, 3])?.reshape([h * n, b, n])?;
            let rv = value.reshape([n, n, h, dh])?.permute(&[2, 0, 1, 3])?.reshape([h * n, n, dh])?;
            let rel = aa.bmm(&rv)?.reshape([h, n, b, dh])?.permute(&[2, 0, 1, 3])?.reshape([b * h, n, dh])?;
            ctx = ctx.add(&rel)?;
        }
        let merged = ctx.reshape([b, h, n, dh])?.permute(&[0, 2, 1, 3])?.reshape([b * n, d])?;
        let y = self.out.forward(p, &merged)?.reshape([b, n, d])?;
        Ok((y, attn))
    }

    /// Multiply-add count (×2) for one pass over `batch` sequences of length `n`.
    pub fn flops(&self, batch: usize, n: usize, relative_embeddings: bool) -> u64 {
        let rows = batch * n;
        let proj = 4 * self.query.flops(rows);
        let pairs = 2 * (batch * n * n * self.dim) as u64; // one of QKᵀ or A·V
        let rel = if relative_embeddings { 2 * pairs } else { 0 };
        proj + 2 * pairs + rel
    }
}

/// Additive attention mask: `0` where `allowed[i][j]`, `-inf` elsewhere.
pub fn mask_to_bias(allowed: &[Vec<bool>]) -> Tensor {
    let n = allowed.len();
    let data = allowed
        .iter()
        .flat_map(|row| row.iter().map(|&a| if a { 0.0 } else { f64::NEG_INFINITY }))
        .collect();
    Tensor::new([n, n], data).expect("square mask")
}

/// Convenience: registers `mask` on `tape` as a constant.
pub fn mask_var<'t>(tape: &'t Tape, allowed: &[Vec<bool>]) -> Var<'t> {
    tape.constant(mask_to_bias(allowed))
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, activation, rng),
        })
    }

    pub fn forward<'t>(
        &self,
        p: &[Var<'t>],
        x: &Var<'t>,
        pos: &PositionTerms<'t>,
        mask: Option<&Var<'t>>,
    ) -> Result<Var<'t>> {
        let a = self.attn.forward(p, &self.norm_attn.forward(p, x)?, pos, mask)?;
        let x = x.add(&a)?;
        let f = self.ffn.forward(p, &self.norm_ffn.forward(p, &x)?)?;
        x.add(&f)
    }

    pub fn flops(&self, batch: usize, n: usize, relative_embeddings: bool) -> u64 {
        self.attn.flops(batch, n, relative_embeddings) + self.ffn.flops(batch * n)
    }
}
