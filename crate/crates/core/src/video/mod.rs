//! Video preprocessing and the two visual front-ends.
//!
//! Clips are `[T, H, W, C]` tensors of pixel values in `[0, 1]`. Both
//! front-ends map a synchronized clip to one feature row per frame.

pub mod tubelet;
pub mod vgg;
pub mod vit;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::AvtFile;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub use tubelet::{extract_tubelets, SparseClip, TubeletConfig};
pub use vgg::{midplane, VggConfig, VggFrontEnd};
pub use vit::{VitConfig, VitFrontEnd};

/// Frame rate of the acoustic feature rows, which video is resampled to.
pub const TARGET_FPS: f64 = 100.0 / 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `[T, H, W, C]`
    pub frames: Tensor,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(Error::dim("VideoClip::new", s, &[0, 0, 0, 0]));
        }
        if !(1..=3).contains(&s[3]) || s[3] == 2 {
            return Err(Error::Config(format!("{} channels; expected 1 or 3", s[3])));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Config(format!("frame rate {fps} must be positive")));
        }
        Ok(Self { frames, fps })
    }

    pub fn from_avt(file: &AvtFile, fps: f64) -> Result<Self> {
        Self::new(file.to_tensor(), fps)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W, C)`
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let (h, w, c) = self.frame_dims();
        let n = h * w * c;
        &self.frames.data()[t * n..(t + 1) * n]
    }
}

/// Number of frames produced when resampling `n` frames from `fps` to `target`.
pub fn resampled_len(n: usize, fps: f64, target: f64) -> usize {
    (n as f64 * target / fps + 1e-9).floor() as usize
}

/// Nearest-neighbour frame-rate conversion: output frame `t` copies source
/// frame `round(t·fps/target)`, clamped to the last frame.
pub fn resample_nearest(clip: &VideoClip, target: f64) -> Result<VideoClip> {
    let n = clip.len();
    if n == 0 {
        return Err(Error::EmptyInput("video clip has no frames".into()));
    }
    let out = resampled_len(n, clip.fps, target).max(1);
    let (h, w, c) = clip.frame_dims();
    let mut data = Vec::with_capacity(out * h * w * c);
    for t in 0..out {
        let src = ((t as f64 * clip.fps / target).round() as usize).min(n - 1);
        data.extend_from_slice(clip.frame(src));
    }
    VideoClip::new(Tensor::new([out, h, w, c], data)?, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontEndKind {
    Vgg,
    Vit,
}

/// Either visual front-end behind one interface.
#[derive(Clone, Debug)]
pub enum VideoFrontEnd {
    Vgg(VggFrontEnd),
    Vit(VitFrontEnd),
}

impl VideoFrontEnd {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: FrontEndKind,
        vit: &VitConfig,
        vgg: &VggConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            FrontEndKind::Vit => Self::Vit(VitFrontEnd::new(store, prefix, vit.clone(), rng)?),
            FrontEndKind::Vgg => Self::Vgg(VggFrontEnd::new(store, prefix, vgg.clone(), rng)?),
        })
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Vgg(f) => f.cfg.dim,
            Self::Vit(f) => f.cfg.dim,
        }
    }

    /// `[T, out_dim]` features for a synchronized clip.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], clip: &VideoClip) -> Result<Var<'t>> {
        match self {
            Self::Vgg(f) => f.forward(tape, p, clip),
            Self::Vit(f) => f.forward_clip(tape, p, clip),
        }
    }

    pub fn count_params(&self, store: &ParamStore) -> usize {
        match self {
            Self::Vgg(f) => f.count_params(store),
            Self::Vit(f) => f.count_params(store),
        }
    }

    pub fn flops(&self, frames: usize) -> u64 {
        match self {
            Self::Vgg(f) => f.cfg.flops(frames),
            Self::Vit(f) => f.cfg.flops(frames),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered_clip(n: usize, fps: f64) -> VideoClip {
        let data = (0..n * 4).map(|i| (i / 4) as f64 / n as f64).collect();
        VideoClip::new(Tensor::new([n, 2, 2, 1], data).unwrap(), fps).unwrap()
    }

    #[test]
    fn thirty_fps_second() {
        let clip = numbered_clip(30, 30.0);
        let r = resample_nearest(&clip, TARGET_FPS).unwrap();
        assert_eq!(r.len(), 33);
        assert_eq!(r.frame(10), clip.frame(9));
    }

    #[test]
    fn identity_at_target_rate() {
        let clip = numbered_clip(17, TARGET_FPS);
        assert_eq!(resample_nearest(&clip, TARGET_FPS).unwrap().frames, clip.frames);
    }

    #[test]
    fn twenty_five_fps_copies_frames_verbatim() {
        let clip = numbered_clip(100, 25.0);
        let r = resample_nearest(&clip, TARGET_FPS).unwrap();
        assert_eq!(r.len(), 133);
        for t in 0..r.len() {
            assert!((0..100).any(|s| clip.frame(s) == r.frame(t)));
        }
    }

    #[test]
    fn empty_clip_rejected() {
        let clip = VideoClip::new(Tensor::zeros([0, 2, 2, 1]), 30.0).unwrap();
        assert!(matches!(resample_nearest(&clip, TARGET_FPS), Err(Error::EmptyInput(_))));
    }
}
