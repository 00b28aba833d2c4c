use std::sync::Arc;

use rand::Rng;

use super::{check_input, local_attention_mask, EncoderConfig, RelativeBias};
use crate::error::Result;
use crate::nn::{mask_var, Activation, FeedForward, LayerNorm, Linear, MultiHeadAttention, PositionTerms};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Half-step feed-forward, windowed self-attention, convolution module,
/// half-step feed-forward and a closing layer norm, all residual.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ffn_in_norm: LayerNorm,
    pub ffn_in: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub rel: RelativeBias,
    pub conv_norm: LayerNorm,
    /// Pointwise expansion to `2·dim` feeding the gated linear unit.
    pub pointwise_in: Linear,
    /// `[kernel, dim]`
    pub depthwise_w: ParamId,
    pub depthwise_b: ParamId,
    pub pointwise_out: Linear,
    pub ffn_out_norm: LayerNorm,
    pub ffn_out: FeedForward,
    pub norm: LayerNorm,
    pub kernel: usize,
}

impl ConformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.model_dim;
        let k = cfg.conv_kernel;
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            ffn_in_norm: LayerNorm::new(store, &n("ln_ffn_in"), d),
            ffn_in: FeedForward::new(store, &n("ffn_in"), d, cfg.ffn_dim, Activation::Swish, rng),
            attn_norm: LayerNorm::new(store, &n("ln_attn"), d),
            attn: MultiHeadAttention::new(store, &n("attn"), d, cfg.heads, rng)?,
            rel: RelativeBias::new(store, name, cfg.attn_window, cfg.heads, rng),
            conv_norm: LayerNorm::new(store, &n("ln_conv"), d),
            pointwise_in: Linear::new(store, &n("conv.pw_in"), d, 2 * d, rng),
            depthwise_w: store.trunc_normal(n("conv.dw.w"), &[k, d], crate::nn::INIT_STD, rng),
            depthwise_b: store.zeros(n("conv.dw.b"), &[d]),
            pointwise_out: Linear::new(store, &n("conv.pw_out"), d, d, rng),
            ffn_out_norm: LayerNorm::new(store, &n("ln_ffn_out"), d),
            ffn_out: FeedForward::new(store, &n("ffn_out"), d, cfg.ffn_dim, Activation::Swish, rng),
            norm: LayerNorm::new(store, &n("ln_out"), d),
            kernel: k,
        })
    }

    /// Same-padding split for an even or odd kernel: `k/2` on the left.
    pub fn pad_left(&self) -> usize {
        self.kernel / 2
    }

    /// `x` is `[T, dim]`.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>, bias: Var<'t>, mask: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (t, d) = (s[0], s[1]);
        let f = self.ffn_in.forward(p, &self.ffn_in_norm.forward(p, x)?)?;
        let x = x.add(&f.scale(0.5))?;

        let a = self
            .attn
            .forward(p, &self.attn_norm.forward(p, &x)?.reshape([1, t, d])?, &PositionTerms::Bias(bias), Some(mask))?;
        let x = x.add(&a.reshape([t, d])?)?;

        let c = self.pointwise_in.forward(p, &self.conv_norm.forward(p, &x)?)?;
        let glu = c.narrow(1, 0, d)?.mul(&c.narrow(1, d, d)?.sigmoid())?;
        let dw = glu
            .depthwise_conv1d(&self.depthwise_w.of(p), &self.depthwise_b.of(p), self.pad_left())?
            .silu();
        let x = x.add(&self.pointwise_out.forward(p, &dw)?)?;

        let f = self.ffn_out.forward(p, &self.ffn_out_norm.forward(p, &x)?)?;
        let x = x.add(&f.scale(0.5))?;
        self.norm.forward(p, &x)
    }
}

#[derive(Clone, Debug)]
pub struct ConformerEncoder {
    pub cfg: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<ConformerBlock>,
}

impl ConformerEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_dim: usize, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        let input = Linear::new(store, &format!("{prefix}.input"), in_dim, cfg.model_dim, rng);
        let blocks = (0..cfg.layers)
            .map(|i| ConformerBlock::new(store, &format!("{prefix}.block{i}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, input, blocks })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let (t, _) = check_input("conformer_encode", x, self.input.in_dim)?;
        let mask = mask_var(tape, &local_attention_mask(t, self.cfg.attn_window));
        let mut offsets = None;
        let mut h = self.input.forward(p, x)?;
        for block in &self.blocks {
            let offs = offsets.get_or_insert_with(|| Arc::new(block.rel.offsets(t)));
            let bias = block.rel.bias(p, offs, t)?;
            h = block.forward(p, &h, bias, &mask)?;
        }
        Ok(h)
    }
}
