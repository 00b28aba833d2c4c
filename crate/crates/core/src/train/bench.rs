//! Analytic parameter and FLOP counts (multiply-add = 2 FLOPs) and forward
//! latency of the video front-ends.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::video::{FrontEndKind, VggConfig, VideoClip, VideoFrontEnd, VitConfig, TARGET_FPS};

pub const DEFAULT_REPEATS: usize = 20;

pub fn matmul_flops(m: usize, n: usize, k: usize) -> u64 {
    2 * (m * n * k) as u64
}

/// Analytic parameter count of a front-end.
pub fn count_params(kind: FrontEndKind, vit: &VitConfig, vgg: &VggConfig) -> Result<usize> {
    match kind {
        FrontEndKind::Vit => vit.param_count(),
        FrontEndKind::Vgg => Ok(vgg.param_count()),
    }
}

/// Forward FLOPs of a front-end on an input of shape `[T, H, W, C]`.
pub fn count_flops(kind: FrontEndKind, vit: &VitConfig, vgg: &VggConfig, input_shape: [usize; 4]) -> Result<u64> {
    let [t, h, w, c] = input_shape;
    let (size, channels) = match kind {
        FrontEndKind::Vit => (vit.frame_size, vit.channels),
        FrontEndKind::Vgg => (vgg.frame_size, vgg.channels),
    };
    if h != size || w != size || c != channels {
        return Err(Error::dim("count_flops", &[h, w, c], &[size, size, channels]));
    }
    Ok(match kind {
        FrontEndKind::Vit => {
            vit.patches()?;
            vit.flops(t)
        }
        FrontEndKind::Vgg => vgg.flops(t),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Times `repeats` calls of `f` after one untimed warmup call.
pub fn bench_latency(mut f: impl FnMut() -> Result<()>, repeats: usize) -> Result<LatencyStats> {
    if repeats == 0 {
        return Err(Error::Config("latency benchmark needs at least one repeat".into()));
    }
    f()?;
    let runs_ms = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            f().map(|()| start.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_ms = runs_ms.iter().sum::<f64>() / repeats as f64;
    let std_ms = (runs_ms.iter().map(|x| (x - mean_ms).powi(2)).sum::<f64>() / repeats as f64).sqrt();
    Ok(LatencyStats { runs_ms, mean_ms, std_ms })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub frontend: FrontEndKind,
    pub frames: usize,
    pub params: usize,
    pub flops: u64,
    pub latency: LatencyStats,
}

/// Builds a front-end, feeds it a random clip of `frames` frames and reports
/// size, analytic FLOPs and forward latency.
pub fn bench_frontend(
    kind: FrontEndKind,
    vit: &VitConfig,
    vgg: &VggConfig,
    frames: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if frames == 0 {
        return Err(Error::EmptyInput("benchmark clip has no frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let front = VideoFrontEnd::new(&mut store, "front", kind, vit, vgg, &mut rng)?;
    let (size, c) = match kind {
        FrontEndKind::Vit => (vit.frame_size, vit.channels),
        FrontEndKind::Vgg => (vgg.frame_size, vgg.channels),
    };
    let shape = [frames, size, size, c];
    let data = (0..shape.iter().product()).map(|_| rng.gen::<f64>()).collect();
    let clip = VideoClip::new(Tensor::new(shape, data)?, TARGET_FPS)?;
    let latency = bench_latency(
        || {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            front.forward(&tape, &p, &clip).map(|_| ())
        },
        repeats,
    )?;
    Ok(BenchReport {
        frontend: kind,
        frames,
        params: front.count_params(&store),
        flops: count_flops(kind, vit, vgg, shape)?,
        latency,
    })
}
