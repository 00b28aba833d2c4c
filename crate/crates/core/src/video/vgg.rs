//! (2+1)D convolutional front-end: each 3×3×3 convolution is split into a
//! 1×3×3 spatial and a 3×1×1 temporal convolution with a midplane width
//! between them. Max pooling after every pair shrinks the frame to 1×1.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::VideoClip;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{kernels, ParamId, ParamStore, Tape, Tensor, Var};

pub const SPATIAL_KERNEL: usize = 3;
pub const TEMPORAL_KERNEL: usize = 3;

/// Midplane width giving a (2+1)D pair the parameter count of a full
/// `t × d × d` convolution from `n_in` to `n_out` channels.
pub fn midplane(t: usize, d: usize, n_in: usize, n_out: usize) -> usize {
    (t * d * d * n_in * n_out) / (d * d * n_in + t * n_out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VggStage {
    pub mid: usize,
    pub out: usize,
    /// Spatial max-pool factor applied after the pair.
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VggConfig {
    pub frame_size: usize,
    pub channels: usize,
    pub stages: Vec<VggStage>,
    /// Width of the final projection.
    pub dim: usize,
}

impl Default for VggConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl VggConfig {
    pub fn full() -> Self {
        let s = |mid, out, pool| VggStage { mid, out, pool };
        Self {
            frame_size: 128,
            channels: 3,
            stages: vec![s(23, 64, 8), s(230, 128, 2), s(460, 256, 2), s(921, 512, 2), s(460, 512, 2)],
            dim: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.dim == 0 {
            return Err(Error::Config("VGG front-end needs at least one stage".into()));
        }
        let mut size = self.frame_size;
        for st in &self.stages {
            if st.pool == 0 || !size.is_multiple_of(st.pool) || st.mid == 0 || st.out == 0 {
                return Err(Error::Config(format!("stage {st:?} does not fit a {size}-pixel map")));
            }
            size /= st.pool;
        }
        if size != 1 {
            return Err(Error::Config(format!(
                "pooling leaves {size}×{size} maps; the stack must reduce {} pixels to 1",
                self.frame_size
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let k = SPATIAL_KERNEL * SPATIAL_KERNEL;
        let mut cin = self.channels;
        let mut n = 0;
        for st in &self.stages {
            n += k * cin * st.mid + st.mid + TEMPORAL_KERNEL * st.mid * st.out + st.out;
            cin = st.out;
        }
        n + cin * self.dim + self.dim
    }

    pub fn flops(&self, frames: usize) -> u64 {
        let k = (SPATIAL_KERNEL * SPATIAL_KERNEL) as u64;
        let (mut cin, mut size) = (self.channels as u64, self.frame_size as u64);
        let mut per_frame = 0;
        for st in &self.stages {
            let (mid, out) = (st.mid as u64, st.out as u64);
            per_frame += size * size * 2 * (k * cin * mid + TEMPORAL_KERNEL as u64 * mid * out);
            cin = out;
            size /= st.pool as u64;
        }
        frames as u64 * (per_frame + 2 * cin * self.dim as u64)
    }
}

#[derive(Clone, Debug)]
struct Pair {
    spatial_w: ParamId,
    spatial_b: ParamId,
    temporal_w: ParamId,
    temporal_b: ParamId,
    pool: usize,
}

#[derive(Clone, Debug)]
pub struct VggFrontEnd {
    pub cfg: VggConfig,
    pub prefix: String,
    pairs: Vec<Pair>,
    pub proj: Linear,
}

/// He-normal convolution kernel.
fn conv_kernel<R: Rng + ?Sized>(store: &mut ParamStore, name: String, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    store.add(name, Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape"))
}

impl VggFrontEnd {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: VggConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (k, kt) = (SPATIAL_KERNEL, TEMPORAL_KERNEL);
        let mut cin = cfg.channels;
        let mut pairs = Vec::with_capacity(cfg.stages.len());
        for (i, st) in cfg.stages.iter().enumerate() {
            let name = |s: &str| format!("{prefix}.pair{i}.{s}");
            pairs.push(Pair {
                spatial_w: conv_kernel(store, name("spatial.w"), &[k, k, cin, st.mid], k * k * cin, rng),
                spatial_b: store.zeros(name("spatial.b"), &[st.mid]),
                temporal_w: conv_kernel(store, name("temporal.w"), &[kt, st.mid, st.out], kt * st.mid, rng),
                temporal_b: store.zeros(name("temporal.b"), &[st.out]),
                pool: st.pool,
            });
            cin = st.out;
        }
        let proj = Linear::new(store, &format!("{prefix}.proj"), cin, cfg.dim, rng);
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            pairs,
            proj,
        })
    }

    pub fn count_params(&self, store: &ParamStore) -> usize {
        store.count_prefix(&format!("{}.", self.prefix))
    }

    /// `[T, dim]` features.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], clip: &VideoClip) -> Result<Var<'t>> {
        let (h, w, c) = clip.frame_dims();
        if clip.is_empty() {
            return Err(Error::EmptyInput("video clip has no frames".into()));
        }
        if h != self.cfg.frame_size || w != self.cfg.frame_size || c != self.cfg.channels {
            return Err(Error::dim(
                "vgg21d_forward",
                &[h, w, c],
                &[self.cfg.frame_size, self.cfg.frame_size, self.cfg.channels],
            ));
        }
        let t = clip.len();
        let planar = kernels::permute(clip.frames.data(), clip.frames.shape(), &[0, 3, 1, 2]);
        let (distinct, run) = distinct_frames(&planar, t);
        let frame = planar.len() / t;
        let unique: Vec<f64> = distinct.iter().flat_map(|&f| &planar[f * frame..(f + 1) * frame]).copied().collect();
        let mut x = tape.constant(Tensor::new([distinct.len(), c, h, w], unique)?);
        // Static spans repeat frames; the first pair runs once per distinct
        // frame and per distinct temporal window, then expands back to T.
        let (first, rest) = self.pairs.split_first().expect("validated non-empty");
        x = x.conv_spatial(&first.spatial_w.of(p), &first.spatial_b.of(p))?.relu();
        let (windows, slot) = distinct_windows(&run, TEMPORAL_KERNEL);
        x = x.conv_temporal_windows(&first.temporal_w.of(p), &first.temporal_b.of(p), Arc::new(windows))?.relu();
        if first.pool > 1 {
            x = x.max_pool2d(first.pool)?;
        }
        let s = x.shape();
        let width = s[1..].iter().product::<usize>();
        x = x.reshape([s[0], width])?.gather_rows(Arc::new(slot))?.reshape([t, s[1], s[2], s[3]])?;
        for pair in rest {
            x = x.conv_spatial(&pair.spatial_w.of(p), &pair.spatial_b.of(p))?.relu();
            x = x.conv_temporal(&pair.temporal_w.of(p), &pair.temporal_b.of(p))?.relu();
            if pair.pool > 1 {
                x = x.max_pool2d(pair.pool)?;
            }
        }
        let s = x.shape();
        let x = x.reshape([s[0], s[1]])?;
        self.proj.forward(p, &x)
    }
}

/// First frame of every run of identical consecutive frames, and the run of each frame.
fn distinct_frames(data: &[f64], frames: usize) -> (Vec<usize>, Vec<usize>) {
    let size = data.len() / frames.max(1);
    let mut firsts: Vec<usize> = Vec::new();
    let mut run = Vec::with_capacity(frames);
    for t in 0..frames {
        let repeat = firsts.last().is_some_and(|&f| data[f * size..(f + 1) * size] == data[t * size..(t + 1) * size]);
        if !repeat {
            firsts.push(t);
        }
        run.push(firsts.len() - 1);
    }
    (firsts, run)
}

/// Distinct zero-padded temporal windows over run ids, and each frame's window.
fn distinct_windows(run: &[usize], k: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut index: HashMap<Vec<Option<usize>>, usize> = HashMap::new();
    let mut windows = Vec::new();
    let slot = (0..run.len())
        .map(|t| {
            let key: Vec<Option<usize>> = (0..k).map(|tap| (t + tap).checked_sub(k / 2).and_then(|s| run.get(s).copied())).collect();
            *index.entry(key.clone()).or_insert_with(|| {
                windows.extend_from_slice(&key);
                windows.len() / k - 1
            })
        })
        .collect();
    (windows, slot)
}
