use std::sync::Arc;

use rand::Rng;

use super::{check_input, local_attention_mask, EncoderConfig, RelativeBias};
use crate::error::Result;
use crate::nn::{mask_var, Activation, LayerNorm, Linear, PositionTerms, TransformerBlock};
use crate::tensor::{ParamStore, Tape, Var};

/// Input projection, pre-norm blocks with windowed relative-bias attention,
/// final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub cfg: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<(TransformerBlock, RelativeBias)>,
    pub norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_dim: usize, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.model_dim;
        let input = Linear::new(store, &format!("{prefix}.input"), in_dim, d, rng);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let name = format!("{prefix}.block{i}");
                Ok((
                    TransformerBlock::new(store, &name, d, cfg.heads, cfg.ffn_dim, Activation::Relu, rng)?,
                    RelativeBias::new(store, &name, cfg.attn_window, cfg.heads, rng),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), d);
        Ok(Self { cfg, input, blocks, norm })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let (t, _) = check_input("transformer_encode", x, self.input.in_dim)?;
        let d = self.cfg.model_dim;
        let mask = mask_var(tape, &local_attention_mask(t, self.cfg.attn_window));
        let mut offsets = None;
        let mut h = self.input.forward(p, x)?.reshape([1, t, d])?;
        for (block, rel) in &self.blocks {
            let offs = offsets.get_or_insert_with(|| Arc::new(rel.offsets(t)));
            let bias = rel.bias(p, offs, t)?;
            h = block.forward(p, &h, &PositionTerms::Bias(bias), Some(&mask))?;
        }
        self.norm.forward(p, &h)?.reshape([t, d])
    }
}
