//! Audio/visual fusion and the two sequence encoders.

mod conformer;
mod transformer;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use conformer::{ConformerBlock, ConformerEncoder};
pub use transformer::TransformerEncoder;

use crate::audio::AudioFeatures;
use crate::error::{Error, Result};
use crate::nn::INIT_STD;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Conformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Timesteps visible on each side of a query.
    pub attn_window: usize,
    /// Depthwise kernel width (conformer only).
    pub conv_kernel: usize,
    pub ffn_dim: usize,
}

impl EncoderConfig {
    pub fn full_transformer() -> Self {
        Self {
            kind: EncoderKind::Transformer,
            layers: 14,
            model_dim: 512,
            heads: 8,
            attn_window: 100,
            conv_kernel: 32,
            ffn_dim: 2048,
        }
    }

    pub fn full_conformer() -> Self {
        Self {
            kind: EncoderKind::Conformer,
            layers: 17,
            ..Self::full_transformer()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.kind == EncoderKind::Conformer && self.conv_kernel == 0 {
            return Err(Error::Config("conformer kernel must be positive".into()));
        }
        Ok(())
    }
}

/// Row-wise concatenation `[A ‖ V]`; without audio the visual rows pass through.
pub fn fuse<'t>(tape: &'t Tape, audio: Option<&AudioFeatures>, video: &Var<'t>) -> Result<Var<'t>> {
    let vs = video.shape();
    if vs.len() != 2 {
        return Err(Error::dim("fuse", &vs, &[0, 0]));
    }
    let Some(a) = audio else {
        return Ok(*video);
    };
    let rows = a.frames();
    if rows != vs[0] {
        return Err(Error::Alignment {
            audio: rows,
            video: vs[0],
        });
    }
    tape.concat(&[tape.constant(a.values.clone()), *video], 1)
}

/// `mask[i][j]` is true iff `|i − j| ≤ w`.
pub fn local_attention_mask(t: usize, w: usize) -> Vec<Vec<bool>> {
    (0..t).map(|i| (0..t).map(|j| i.abs_diff(j) <= w).collect()).collect()
}

/// Learned per-head logit bias indexed by the offset `j − i`, clipped to ±window.
#[derive(Clone, Debug)]
pub struct RelativeBias {
    pub table: ParamId,
    pub window: usize,
    pub heads: usize,
}

impl RelativeBias {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, window: usize, heads: usize, rng: &mut R) -> Self {
        let table = store.trunc_normal(format!("{name}.rel_bias"), &[2 * window + 1, heads], INIT_STD, rng);
        Self { table, window, heads }
    }

    /// Table row for every (query, key) pair of an `n`-step sequence.
    pub fn offsets(&self, n: usize) -> Vec<usize> {
        let w = self.window as isize;
        (0..n as isize)
            .flat_map(|i| (0..n as isize).map(move |j| ((j - i).clamp(-w, w) + w) as usize))
            .collect()
    }

    /// `[heads, n, n]` bias.
    pub fn bias<'t>(&self, p: &[Var<'t>], offsets: &Arc<Vec<usize>>, n: usize) -> Result<Var<'t>> {
        self.table
            .of(p)
            .gather_rows(Arc::clone(offsets))?
            .reshape([n, n, self.heads])?
            .permute(&[2, 0, 1])
    }
}

/// Either encoder behind one interface; maps `[T, in_dim]` to `[T, model_dim]`.
#[derive(Clone, Debug)]
pub enum Encoder {
    Transformer(TransformerEncoder),
    Conformer(ConformerEncoder),
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_dim: usize, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            EncoderKind::Transformer => Self::Transformer(TransformerEncoder::new(store, prefix, in_dim, cfg.clone(), rng)?),
            EncoderKind::Conformer => Self::Conformer(ConformerEncoder::new(store, prefix, in_dim, cfg.clone(), rng)?),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            Self::Transformer(e) => e.forward(tape, p, x),
            Self::Conformer(e) => e.forward(tape, p, x),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        match self {
            Self::Transformer(e) => &e.cfg,
            Self::Conformer(e) => &e.cfg,
        }
    }
}

pub(crate) fn check_input(op: &'static str, x: &Var<'_>, in_dim: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 || s[1] != in_dim {
        return Err(Error::dim(op, &s, &[0, in_dim]));
    }
    Ok((s[0], s[1]))
}
