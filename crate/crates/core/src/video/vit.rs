//! Tubelet transformer front-end.
//!
//! Every frame's tubelets are embedded by one shared affine map, then a stack
//! of pre-norm transformer blocks attends across the patch axis with the time
//! axis as batch. Relative positions between patches enter as learned key and
//! value embeddings indexed by 2D patch offset, shared by all blocks. The
//! representation of patch 0 after a final layer norm is the frame's feature.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tubelet::{SparseClip, TubeletConfig};
use super::VideoClip;
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Linear, PositionTerms, TransformerBlock, INIT_STD};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub frame_size: usize,
    pub channels: usize,
    pub tubelet: TubeletConfig,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl VitConfig {
    pub fn full() -> Self {
        Self {
            frame_size: 128,
            channels: 3,
            tubelet: TubeletConfig::default(),
            dim: 512,
            layers: 6,
            heads: 8,
            ffn_dim: 2048,
            activation: Activation::Relu,
        }
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        self.tubelet.grid(self.frame_size, self.frame_size)
    }

    pub fn patches(&self) -> Result<usize> {
        self.grid().map(|(r, c)| r * c)
    }

    pub fn flat_dim(&self) -> usize {
        self.tubelet.flat_dim(self.channels)
    }

    /// Number of distinct 2D patch offsets.
    pub fn offsets(&self) -> Result<usize> {
        self.grid().map(|(r, c)| (2 * r - 1) * (2 * c - 1))
    }

    pub fn param_count(&self) -> Result<usize> {
        let (d, f) = (self.dim, self.ffn_dim);
        let block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        Ok(self.flat_dim() * d + d + 2 * self.offsets()? * d + self.layers * block + 2 * d)
    }

    /// Analytic forward FLOPs (multiply-add = 2) for `frames` frames.
    pub fn flops(&self, frames: usize) -> u64 {
        let n = self.patches().unwrap_or(0) as u64;
        let (d, f, t) = (self.dim as u64, self.ffn_dim as u64, frames as u64);
        let embed = 2 * n * self.flat_dim() as u64 * d;
        let proj = 4 * 2 * n * d * d;
        // QKᵀ, A·V and the two relative-embedding products
        let pairs = 4 * 2 * n * n * d;
        let ffn = 2 * 2 * n * d * f;
        t * (embed + self.layers as u64 * (proj + pairs + ffn))
    }
}

#[derive(Clone, Debug)]
pub struct VitFrontEnd {
    pub cfg: VitConfig,
    pub prefix: String,
    pub embed: Linear,
    pub rel_key: ParamId,
    pub rel_value: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    /// Offset-table row for every (query, key) patch pair, row-major.
    offsets: Arc<Vec<usize>>,
}

impl VitFrontEnd {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: VitConfig, rng: &mut R) -> Result<Self> {
        if cfg.frame_size == 0 || cfg.dim == 0 {
            return Err(Error::Config("ViT frame size and width must be positive".into()));
        }
        let (gh, gw) = cfg.grid()?;
        let embed = Linear::new(store, &format!("{prefix}.embed"), cfg.flat_dim(), cfg.dim, rng);
        let rows = cfg.offsets()?;
        let rel_key = store.trunc_normal(format!("{prefix}.rel_key"), &[rows, cfg.dim], INIT_STD, rng);
        let rel_value = store.trunc_normal(format!("{prefix}.rel_value"), &[rows, cfg.dim], INIT_STD, rng);
        let blocks = (0..cfg.layers)
            .map(|i| {
                TransformerBlock::new(store, &format!("{prefix}.block{i}"), cfg.dim, cfg.heads, cfg.ffn_dim, cfg.activation, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), cfg.dim);
        let n = gh * gw;
        let mut offsets = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dy = (j / gw) as isize - (i / gw) as isize + gh as isize - 1;
                let dx = (j % gw) as isize - (i % gw) as isize + gw as isize - 1;
                offsets.push(dy as usize * (2 * gw - 1) + dx as usize);
            }
        }
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            embed,
            rel_key,
            rel_value,
            blocks,
            norm,
            offsets: Arc::new(offsets),
        })
    }

    pub fn count_params(&self, store: &ParamStore) -> usize {
        store.count_prefix(&format!("{}.", self.prefix))
    }

    /// Features from already flattened tubelets `[T, N, flat]`.
    pub fn forward_tubelets<'t>(&self, tape: &'t Tape, p: &[Var<'t>], flat: Tensor) -> Result<Var<'t>> {
        let s = flat.shape().to_vec();
        if s.len() != 3 || s[2] != self.cfg.flat_dim() {
            return Err(Error::dim("vit_forward", &s, &[0, 0, self.cfg.flat_dim()]));
        }
        let x = self.embed.forward(p, &tape.constant(flat))?;
        self.encode(p, &x)
    }

    /// Features straight from a synchronized clip, via the sparse embedding.
    pub fn forward_clip<'t>(&self, tape: &'t Tape, p: &[Var<'t>], clip: &VideoClip) -> Result<Var<'t>> {
        let (h, w, c) = clip.frame_dims();
        if h != self.cfg.frame_size || w != self.cfg.frame_size || c != self.cfg.channels {
            return Err(Error::dim(
                "vit_forward",
                &[h, w, c],
                &[self.cfg.frame_size, self.cfg.frame_size, self.cfg.channels],
            ));
        }
        if clip.is_empty() {
            return Err(Error::EmptyInput("video clip has no frames".into()));
        }
        let sparse = Arc::new(SparseClip::new(clip, &self.cfg.tubelet)?);
        let x = sparse.embed(tape, &self.embed.w.of(p), &self.embed.b.of(p))?;
        self.encode(p, &x)
    }

    /// Transformer over patches of embedded tubelets `[T, N, D]` → `[T, D]`.
    pub fn encode<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (t, n, d) = (s[0], s[1], s[2]);
        let gather = |id: ParamId| -> Result<Var<'t>> { id.of(p).gather_rows(Arc::clone(&self.offsets))?.reshape([n, n, d]) };
        let pos = PositionTerms::Embeddings {
            key: gather(self.rel_key)?,
            value: gather(self.rel_value)?,
        };
        let mut h = *x;
        for block in &self.blocks {
            h = block.forward(p, &h, &pos, None)?;
        }
        let h = self.norm.forward(p, &h)?;
        h.narrow(1, 0, 1)?.reshape([t, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::extract_tubelets;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> VitConfig {
        VitConfig {
            frame_size: 16,
            channels: 1,
            tubelet: TubeletConfig {
                patch_w: 4,
                patch_h: 4,
                depth: 2,
            },
            dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn analytic_count_matches_construction() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vit = VitFrontEnd::new(&mut store, "v", small(), &mut rng).unwrap();
        assert_eq!(vit.count_params(&store), small().param_count().unwrap());
        assert_eq!(store.count(), vit.count_params(&store));
    }

    #[test]
    fn zero_weights_give_identical_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vit = VitFrontEnd::new(&mut store, "v", small(), &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if !store.name(id).contains("gain") {
                store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let frames = Tensor::new([3, 16, 16, 1], (0..768).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let clip = VideoClip::new(frames, 30.0).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let y = vit.forward_clip(&tape, &p, &clip).unwrap().value();
        assert_eq!(y.shape(), &[3, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_and_sparse_paths_agree() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vit = VitFrontEnd::new(&mut store, "v", small(), &mut rng).unwrap();
        let frames = Tensor::new([5, 16, 16, 1], (0..1280).map(|i| ((i % 7) as f64 * 0.2).max(0.0)).collect()).unwrap();
        let clip = VideoClip::new(frames, 30.0).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let a = vit.forward_clip(&tape, &p, &clip).unwrap().value();
        let flat = extract_tubelets(&clip, &vit.cfg.tubelet).unwrap();
        let b = vit.forward_tubelets(&tape, &p, flat).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn offsets_are_symmetric_about_the_centre() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vit = VitFrontEnd::new(&mut store, "v", small(), &mut rng).unwrap();
        let n = 16;
        let centre = vit.cfg.offsets().unwrap() / 2;
        for i in 0..n {
            assert_eq!(vit.offsets[i * n + i], centre);
            for j in 0..n {
                assert_eq!(vit.offsets[i * n + j] + vit.offsets[j * n + i], 2 * centre);
            }
        }
    }

    #[test]
    fn full_size_embedding() {
        let cfg = VitConfig::full();
        assert_eq!(cfg.flat_dim(), 24_576);
        assert_eq!(cfg.flat_dim() * 512 + 512, 12_583_424);
        assert_eq!(cfg.patches().unwrap(), 16);
    }
}
