use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::{kernels, CustomOp, Tape, Tensor, Var};

/// 3D patch geometry. Flattened tubelets are indexed
/// `((y·patch_w + x)·depth + d)·C + c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TubeletConfig {
    pub patch_w: usize,
    pub patch_h: usize,
    pub depth: usize,
}

impl Default for TubeletConfig {
    fn default() -> Self {
        Self {
            patch_w: 32,
            patch_h: 32,
            depth: 8,
        }
    }
}

impl TubeletConfig {
    /// Patch grid `(rows, cols)` for `h × w` frames.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.patch_h == 0 || self.patch_w == 0 || self.depth == 0 {
            return Err(Error::Config("tubelet extents must be positive".into()));
        }
        if !h.is_multiple_of(self.patch_h) || !w.is_multiple_of(self.patch_w) {
            return Err(Error::Config(format!(
                "{h}×{w} frames are not divisible into {}×{} patches",
                self.patch_h, self.patch_w
            )));
        }
        Ok((h / self.patch_h, w / self.patch_w))
    }

    pub fn patches(&self, h: usize, w: usize) -> Result<usize> {
        self.grid(h, w).map(|(r, c)| r * c)
    }

    pub fn flat_dim(&self, channels: usize) -> usize {
        self.patch_w * self.patch_h * self.depth * channels
    }

    /// Source frame feeding depth slot `d` of the window centred on `t`.
    pub fn source_frame(&self, t: usize, d: usize, frames: usize) -> usize {
        (t + d).saturating_sub(self.depth / 2).min(frames - 1)
    }
}

/// `[T, N, P_h·P_w·P_d·C]`: one row per frame, window `[t − P_d/2, t + P_d/2)`
/// with edge frames replicated, patches in row-major grid order.
pub fn extract_tubelets(clip: &VideoClip, cfg: &TubeletConfig) -> Result<Tensor> {
    let (h, w, c) = clip.frame_dims();
    let (gh, gw) = cfg.grid(h, w)?;
    let t_len = clip.len();
    let n = gh * gw;
    let flat = cfg.flat_dim(c);
    let mut out = vec![0.0; t_len * n * flat];
    for t in 0..t_len {
        for d in 0..cfg.depth {
            let frame = clip.frame(cfg.source_frame(t, d, t_len));
            for y in 0..h {
                let (py, yy) = (y / cfg.patch_h, y % cfg.patch_h);
                for x in 0..w {
                    let (px, xx) = (x / cfg.patch_w, x % cfg.patch_w);
                    let base = (t * n + py * gw + px) * flat + ((yy * cfg.patch_w + xx) * cfg.depth + d) * c;
                    let src = (y * w + x) * c;
                    out[base..base + c].copy_from_slice(&frame[src..src + c]);
                }
            }
        }
    }
    Tensor::new([t_len, n, flat], out)
}

#[derive(Clone, Copy, Debug)]
struct Pixel {
    patch: u32,
    /// Flattened tubelet index at depth 0; depth `d` adds `d·C`.
    row: u32,
    value: f64,
}

/// Nonzero pixels of a clip, pre-indexed for tubelet embedding.
///
/// Runs of identical consecutive frames (static scenes, frame-rate
/// upsampling) are stored once, and every distinct (frame, depth slot)
/// contribution is computed once and shared by all output frames using it.
#[derive(Clone, Debug)]
pub struct SparseClip {
    cfg: TubeletConfig,
    frames: usize,
    patches: usize,
    channels: usize,
    /// Nonzeros of each distinct frame.
    pixels: Vec<Vec<Pixel>>,
    /// `(distinct frame, depth slot, output frames)`.
    groups: Vec<(usize, usize, Vec<usize>)>,
}

impl SparseClip {
    pub fn new(clip: &VideoClip, cfg: &TubeletConfig) -> Result<Self> {
        let (h, w, c) = clip.frame_dims();
        let (gh, gw) = cfg.grid(h, w)?;
        let mut distinct = Vec::with_capacity(clip.len());
        let mut pixels: Vec<Vec<Pixel>> = Vec::new();
        for t in 0..clip.len() {
            if t > 0 && clip.frame(t) == clip.frame(t - 1) {
                distinct.push(pixels.len() - 1);
                continue;
            }
            distinct.push(pixels.len());
            pixels.push(
                clip.frame(t)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, &value)| {
                        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
                        let patch = (y / cfg.patch_h) * gw + x / cfg.patch_w;
                        let row = ((y % cfg.patch_h) * cfg.patch_w + x % cfg.patch_w) * cfg.depth * c + ch;
                        Pixel {
                            patch: patch as u32,
                            row: row as u32,
                            value,
                        }
                    })
                    .collect(),
            );
        }
        let mut index = std::collections::BTreeMap::<(usize, usize), Vec<usize>>::new();
        for t in 0..clip.len() {
            for d in 0..cfg.depth {
                let src = distinct[cfg.source_frame(t, d, clip.len())];
                if !pixels[src].is_empty() {
                    index.entry((src, d)).or_default().push(t);
                }
            }
        }
        Ok(Self {
            cfg: *cfg,
            frames: clip.len(),
            patches: gh * gw,
            channels: c,
            pixels,
            groups: index.into_iter().map(|((f, d), ts)| (f, d, ts)).collect(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn flat_dim(&self) -> usize {
        self.cfg.flat_dim(self.channels)
    }

    /// Nonzero pixels stored after merging repeated frames.
    pub fn nonzeros(&self) -> usize {
        self.pixels.iter().map(Vec::len).sum()
    }

    /// Tubelet embedding `flat · W + b` as `[T, N, D]` without materializing
    /// the flattened tubelets. Only `w` and `b` receive gradients.
    pub fn embed<'t>(self: &Arc<Self>, tape: &'t Tape, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let (wv, bv) = (w.value(), b.value());
        let flat = self.flat_dim();
        if wv.shape().len() != 2 || wv.shape()[0] != flat || bv.shape() != [wv.shape()[1]] {
            return Err(Error::dim("tubelet_embed", wv.shape(), &[flat]));
        }
        let dim = wv.shape()[1];
        let (t_len, n) = (self.frames, self.patches);
        let mut out = vec![0.0; t_len * n * dim];
        for row in out.chunks_exact_mut(dim) {
            row.copy_from_slice(bv.data());
        }
        let wd = wv.data();
        let mut part = vec![0.0; n * dim];
        for (f, d, ts) in &self.groups {
            part.fill(0.0);
            let off = d * self.channels;
            for px in &self.pixels[*f] {
                let (o, k) = (px.patch as usize * dim, px.row as usize + off);
                kernels::axpy(px.value, &wd[k * dim..(k + 1) * dim], &mut part[o..o + dim]);
            }
            for &t in ts {
                kernels::axpy(1.0, &part, &mut out[t * n * dim..(t + 1) * n * dim]);
            }
        }
        let value = Tensor::new([t_len, n, dim], out)?;
        Ok(tape.custom(&[*w, *b], value, Box::new(TubeletEmbed { clip: Arc::clone(self) })))
    }
}

struct TubeletEmbed {
    clip: Arc<SparseClip>,
}

impl CustomOp for TubeletEmbed {
    fn name(&self) -> &'static str {
        "tubelet_embed"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let dim = inputs[1].len();
        let n = self.clip.patches;
        let gw = needs[0].then(|| {
            let mut gw = vec![0.0; inputs[0].len()];
            let mut g = vec![0.0; n * dim];
            for (f, d, ts) in &self.clip.groups {
                g.fill(0.0);
                for &t in ts {
                    kernels::axpy(1.0, &grad[t * n * dim..(t + 1) * n * dim], &mut g);
                }
                let off = d * self.clip.channels;
                for px in &self.clip.pixels[*f] {
                    let (o, k) = (px.patch as usize * dim, px.row as usize + off);
                    kernels::axpy(px.value, &g[o..o + dim], &mut gw[k * dim..(k + 1) * dim]);
                }
            }
            gw
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; dim];
            for row in grad.chunks_exact(dim) {
                for (a, g) in gb.iter_mut().zip(row) {
                    *a += g;
                }
            }
            gb
        });
        vec![gw, gb]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(t: usize, h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> VideoClip {
        let mut data = Vec::with_capacity(t * h * w * c);
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(f(ti, y, x, ch));
                    }
                }
            }
        }
        VideoClip::new(Tensor::new([t, h, w, c], data).unwrap(), super::super::TARGET_FPS).unwrap()
    }

    #[test]
    fn default_geometry() {
        let c = clip(12, 128, 128, 1, |_, _, _, _| 0.0);
        let flat = extract_tubelets(&c, &TubeletConfig::default()).unwrap();
        assert_eq!(flat.shape(), &[12, 16, 8192]);
    }

    #[test]
    fn constant_clip_gives_identical_tubelets() {
        let c = clip(5, 64, 64, 3, |_, _, _, _| 0.25);
        let flat = extract_tubelets(&c, &TubeletConfig::default()).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_pixel_lands_in_expected_patch_and_windows() {
        let c = clip(12, 128, 128, 1, |t, y, x, _| if t == 5 && y == 0 && x == 40 { 1.0 } else { 0.0 });
        let cfg = TubeletConfig::default();
        let flat = extract_tubelets(&c, &cfg).unwrap();
        let f = cfg.flat_dim(1);
        for t in 0..12 {
            for n in 0..16 {
                let row = &flat.data()[(t * 16 + n) * f..(t * 16 + n + 1) * f];
                let nz: Vec<usize> = (0..f).filter(|&i| row[i] != 0.0).collect();
                let in_window = t + 4 > 5 && 5 + 4 >= t;
                if n == 1 && in_window {
                    // x = 40 is column 8 inside patch 1; depth slot 5 − t + 4
                    assert_eq!(nz, vec![8 * cfg.depth + (5 + 4 - t)], "t={t}");
                } else {
                    assert!(nz.is_empty(), "t={t} n={n}");
                }
            }
        }
    }

    #[test]
    fn window_multiset_matches_source_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..6 * 8 * 8 * 3).map(|_| rng.gen()).collect();
        let c = clip(6, 8, 8, 3, |t, y, x, ch| vals[((t * 8 + y) * 8 + x) * 3 + ch]);
        let cfg = TubeletConfig {
            patch_w: 4,
            patch_h: 4,
            depth: 4,
        };
        let flat = extract_tubelets(&c, &cfg).unwrap();
        for t in 0..6 {
            let mut want: Vec<f64> = (0..4).flat_map(|d| c.frame(cfg.source_frame(t, d, 6)).to_vec()).collect();
            let per_t = 4 * cfg.flat_dim(3);
            let mut got = flat.data()[t * per_t..(t + 1) * per_t].to_vec();
            want.sort_by(f64::total_cmp);
            got.sort_by(f64::total_cmp);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn indivisible_frame_is_config_error() {
        let c = clip(2, 30, 32, 1, |_, _, _, _| 0.0);
        assert!(matches!(extract_tubelets(&c, &TubeletConfig::default()), Err(Error::Config(_))));
    }

    fn assert_fused_matches_dense(c: &VideoClip, cfg: &TubeletConfig, rng: &mut ChaCha8Rng) {
        let t = c.len();
        let f = cfg.flat_dim(1);
        let w = Tensor::new([f, 5], (0..f * 5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new([5], (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let sparse = Arc::new(SparseClip::new(c, cfg).unwrap());
        let rows = t * sparse.patches;

        let tape = Tape::new();
        let (wv, bv) = (tape.var(w.clone()), tape.var(b.clone()));
        let fused = sparse.embed(&tape, &wv, &bv).unwrap();
        let flat = tape.constant(extract_tubelets(c, cfg).unwrap());
        let dense = flat.reshape([rows, f]).unwrap().matmul(&wv).unwrap().add_broadcast(&bv).unwrap();
        assert!(fused.value().reshape([rows, 5]).unwrap().max_abs_diff(&dense.value()) < 1e-12);

        let weights = tape.constant(Tensor::new([rows, 5], (0..rows * 5).map(|i| (i as f64).cos()).collect()).unwrap());
        let lf = fused.reshape([rows, 5]).unwrap().mul(&weights).unwrap().sum();
        let ld = dense.mul(&weights).unwrap().sum();
        let both = lf.add(&ld.scale(-1.0)).unwrap();
        let grads = tape.backward(both).unwrap();
        assert!(grads.get(wv).data().iter().all(|g| g.abs() < 1e-12));
        assert!(grads.get(bv).data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn fused_embedding_matches_dense_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = TubeletConfig {
            patch_w: 4,
            patch_h: 4,
            depth: 4,
        };
        let mut frames = Tensor::zeros([7, 8, 8, 1]);
        for v in frames.data_mut() {
            if rng.gen_bool(0.3) {
                *v = rng.gen();
            }
        }
        assert_fused_matches_dense(&VideoClip::new(frames, 30.0).unwrap(), &cfg, &mut rng);
    }

    #[test]
    fn repeated_frames_are_merged_without_changing_the_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = TubeletConfig {
            patch_w: 4,
            patch_h: 4,
            depth: 4,
        };
        // Runs of 3, 1, 4 (blank) and 2 identical frames.
        let keys: Vec<u64> = (0..10).map(|t| [0, 0, 0, 1, 2, 2, 2, 2, 3, 3][t]).collect();
        let c = clip(10, 8, 8, 1, |t, y, x, _| {
            let k = keys[t];
            if k == 2 || !(x + y + k as usize).is_multiple_of(3) {
                0.0
            } else {
                ((x * 8 + y) as f64 * 0.1 + k as f64).sin().abs()
            }
        });
        let sparse = SparseClip::new(&c, &cfg).unwrap();
        assert_eq!(sparse.pixels.len(), 4);
        assert_fused_matches_dense(&c, &cfg, &mut rng);
    }
}
