//! Log-mel acoustic features stacked three frames deep.
//!
//! 25 ms periodic Hann windows every 10 ms, 512-point FFT power spectrum,
//! 80 triangular filters on the HTK mel scale between 125 and 7600 Hz,
//! natural log floored at `ln(1e-10)`. Stacking three consecutive frames gives
//! 240-dimensional rows at 100/3 Hz.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const N_MELS: usize = 80;
pub const MEL_LOW_HZ: f64 = 125.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STACK: usize = 3;
/// Width of a stacked acoustic feature row.
pub const FEATURE_DIM: usize = N_MELS * STACK;
/// Rate of stacked rows in Hz.
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / (HOP * STACK) as f64;

/// Mono 16 kHz audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate {
                got: sample_rate,
                expected: SAMPLE_RATE,
            });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Stacked features, `values` is `[T, 240]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub values: Tensor,
    pub frame_rate: f64,
}

impl AudioFeatures {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of 10 ms frames for `len` samples (zero if shorter than a window).
pub fn num_frames(len: usize) -> usize {
    if len < WINDOW {
        0
    } else {
        (len - WINDOW) / HOP + 1
    }
}

/// Precomputed window, filterbank and FFT plan.
pub struct LogMel {
    window: Vec<f64>,
    /// `[N_MELS][FFT_SIZE/2 + 1]` filter weights.
    filters: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("mels", &self.filters.len()).finish()
    }
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW as f64).cos())
            .collect();
        let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bins = FFT_SIZE / 2 + 1;
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let filters = (0..N_MELS)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            window,
            filters,
            centers_hz: edges[1..=N_MELS].to_vec(),
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
        }
    }

    /// Center frequency of every mel filter in Hz.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// `[T, 80]` log-mel energies with `T = floor((len − 400)/160) + 1`.
    pub fn compute(&self, wave: &Waveform) -> Result<Tensor> {
        if wave.sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate {
                got: wave.sample_rate,
                expected: SAMPLE_RATE,
            });
        }
        let frames = num_frames(wave.len());
        if frames == 0 {
            return Err(Error::EmptyInput(format!(
                "{} samples is shorter than one {WINDOW}-sample window",
                wave.len()
            )));
        }
        let floor = LOG_FLOOR.ln();
        let mut out = Vec::with_capacity(frames * N_MELS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut power = vec![0.0; FFT_SIZE / 2 + 1];
        for f in 0..frames {
            let chunk = &wave.samples[f * HOP..f * HOP + WINDOW];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(if i < WINDOW { chunk[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push(if e > LOG_FLOOR { e.ln() } else { floor });
            }
        }
        Tensor::new([frames, N_MELS], out)
    }
}

/// Convenience wrapper building a fresh [`LogMel`].
pub fn log_mel(wave: &Waveform) -> Result<Tensor> {
    LogMel::new().compute(wave)
}

/// Concatenates non-overlapping triples of rows; trailing frames are dropped.
pub fn stack3(features: &Tensor) -> Result<AudioFeatures> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::dim("stack3", shape, &[0, N_MELS]));
    }
    let (t, d) = (shape[0], shape[1]);
    let rows = t / STACK;
    if rows == 0 {
        return Err(Error::EmptyInput(format!("{t} frames cannot be stacked by {STACK}")));
    }
    let values = Tensor::new([rows, d * STACK], features.data()[..rows * STACK * d].to_vec())?;
    Ok(AudioFeatures {
        values,
        frame_rate: SAMPLE_RATE as f64 / (HOP * STACK) as f64,
    })
}

/// Inverse of [`stack3`] on the frames it kept.
pub fn unstack3(features: &AudioFeatures) -> Result<Tensor> {
    let shape = features.values.shape();
    features.values.reshape([shape[0] * STACK, shape[1] / STACK])
}

/// Waveform to stacked `[T, 240]` features.
pub fn features(wave: &Waveform) -> Result<AudioFeatures> {
    stack3(&log_mel(wave)?)
}
