//! Noise corruption of waveforms: SNR-controlled mixing, a synthetic babble
//! surrogate, overlapping speech and randomized multi-style training noise.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{rms, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const BABBLE_VOICES: usize = 8;
/// Passband of each synthetic voice, in Hz.
pub const VOICE_BAND: (f64, f64) = (150.0, 4000.0);
/// Range of the syllabic amplitude-modulation rate, in Hz.
pub const SYLLABLE_RATE: (f64, f64) = (3.0, 6.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Babble,
    Overlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, snr_db: f64, seed: u64) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::Domain {
                op: "NoiseSpec",
                reason: format!("SNR {snr_db} dB is not finite"),
            });
        }
        Ok(Self { kind, snr_db, seed })
    }

    pub fn clean() -> Self {
        Self {
            kind: NoiseKind::None,
            snr_db: 0.0,
            seed: 0,
        }
    }
}

/// Evaluation conditions: `none`, `babble20`, `babble10`, `babble0`, `overlap`.
impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::clean()),
            "overlap" => Self::new(NoiseKind::Overlap, 0.0, 0),
            _ => match s.strip_prefix("babble").map(str::parse::<u32>) {
                Some(Ok(db @ (0 | 10 | 20))) => Self::new(NoiseKind::Babble, db as f64, 0),
                _ => Err(Error::Config(format!(
                    "unknown noise condition {s:?} (expected none, babble20, babble10, babble0 or overlap)"
                ))),
            },
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NoiseKind::None => write!(f, "none"),
            NoiseKind::Babble => write!(f, "babble{}", self.snr_db),
            NoiseKind::Overlap => write!(f, "overlap"),
        }
    }
}

/// Loops or truncates `noise` to exactly `len` samples.
pub fn fit_length(noise: &[f64], len: usize) -> Vec<f64> {
    if noise.is_empty() {
        return vec![0.0; len];
    }
    noise.iter().copied().cycle().take(len).collect()
}

/// Gain that puts noise of RMS `noise_rms` at `snr_db` below a signal of RMS `signal_rms`.
pub fn noise_scale(signal_rms: f64, noise_rms: f64, snr_db: f64) -> f64 {
    signal_rms / noise_rms * 10f64.powf(-snr_db / 20.0)
}

/// `10·log10(P_signal / P_noise)`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    20.0 * (rms(signal) / rms(noise)).log10()
}

/// Adds `noise`, looped or truncated to the signal's length, at `snr_db`.
pub fn mix_at_snr(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(Error::Domain {
            op: "mix_at_snr",
            reason: format!("SNR {snr_db} dB is not finite"),
        });
    }
    let sig_rms = signal.rms();
    if sig_rms == 0.0 {
        return Err(Error::Degenerate("signal is silent".into()));
    }
    let fitted = fit_length(&noise.samples, signal.len());
    let noise_rms = rms(&fitted);
    if noise_rms == 0.0 {
        return Err(Error::Degenerate("noise is silent".into()));
    }
    let s = noise_scale(sig_rms, noise_rms, snr_db);
    let samples = signal.samples.iter().zip(&fitted).map(|(x, n)| x + s * n).collect();
    Waveform::new(samples, signal.sample_rate)
}

/// Mixes another utterance over `signal` at 0 dB.
pub fn overlap_mix(signal: &Waveform, other: &Waveform) -> Result<Waveform> {
    if signal.is_empty() || other.is_empty() {
        return Err(Error::EmptyInput("overlap needs two non-empty waveforms".into()));
    }
    mix_at_snr(signal, other, 0.0)
}

/// Band-limited Gaussian noise: random phases and Rayleigh magnitudes with a
/// gentle 1/√f tilt inside `band`, nothing outside.
fn band_noise<R: Rng + ?Sized>(len: usize, band: (f64, f64), rng: &mut R) -> Vec<f64> {
    let mut spec = vec![Complex::new(0.0, 0.0); len];
    let bin_hz = SAMPLE_RATE as f64 / len as f64;
    for k in 1..len.div_ceil(2) {
        let f = k as f64 * bin_hz;
        if f < band.0 || f > band.1 {
            continue;
        }
        let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
        let mag = (-2.0 * u1.ln()).sqrt() / f.sqrt();
        let c = Complex::from_polar(mag, std::f64::consts::TAU * u2);
        spec[k] = c;
        spec[len - k] = c.conj();
    }
    FftPlanner::new().plan_fft_inverse(len).process(&mut spec);
    spec.into_iter().map(|c| c.re).collect()
}

/// Multi-talker babble surrogate of `duration` seconds, normalized to unit RMS.
pub fn synth_babble(seed: u64, duration: f64, n_voices: usize) -> Result<Waveform> {
    let len = (duration * SAMPLE_RATE as f64).round() as usize;
    if !(duration > 0.0) || len == 0 || n_voices == 0 {
        return Err(Error::Config(format!("babble needs positive duration and voices, got {duration} s × {n_voices}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    for _ in 0..n_voices {
        let voice = band_noise(len, VOICE_BAND, &mut rng);
        let voice_rms = rms(&voice).max(f64::MIN_POSITIVE);
        let rate = rng.gen_range(SYLLABLE_RATE.0..SYLLABLE_RATE.1);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (i, (o, v)) in out.iter_mut().zip(&voice).enumerate() {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = 0.5 * (1.0 + (std::f64::consts::TAU * rate * t + phase).sin());
            *o += env * v / voice_rms;
        }
    }
    let r = rms(&out);
    out.iter_mut().for_each(|x| *x /= r);
    Waveform::new(out, SAMPLE_RATE)
}

/// Multi-style training noise distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtrConfig {
    pub p_clean: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl Default for MtrConfig {
    fn default() -> Self {
        Self {
            p_clean: 0.2,
            snr_min_db: 0.0,
            snr_max_db: 30.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MtrDraw {
    Clean,
    Babble { snr_db: f64, seed: u64 },
}

impl MtrConfig {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> MtrDraw {
        if rng.gen::<f64>() < self.p_clean {
            MtrDraw::Clean
        } else {
            MtrDraw::Babble {
                snr_db: rng.gen_range(self.snr_min_db..=self.snr_max_db),
                seed: rng.gen(),
            }
        }
    }
}

/// Either the clean signal or the signal under babble at a random SNR.
pub fn mtr_sample<R: Rng + ?Sized>(signal: &Waveform, cfg: &MtrConfig, rng: &mut R) -> Result<Waveform> {
    match cfg.draw(rng) {
        MtrDraw::Babble { snr_db, seed } if signal.rms() > 0.0 => {
            let babble = synth_babble(seed, signal.duration_secs(), BABBLE_VOICES)?;
            mix_at_snr(signal, &babble, snr_db)
        }
        _ => Ok(signal.clone()),
    }
}

/// Applies an evaluation noise condition; `overlap` needs the interfering utterance.
pub fn apply_noise(signal: &Waveform, spec: &NoiseSpec, other: Option<&Waveform>) -> Result<Waveform> {
    match spec.kind {
        NoiseKind::None => Ok(signal.clone()),
        NoiseKind::Babble => {
            let babble = synth_babble(spec.seed, signal.duration_secs(), BABBLE_VOICES)?;
            mix_at_snr(signal, &babble, spec.snr_db)
        }
        NoiseKind::Overlap => {
            let other = other.ok_or_else(|| Error::Config("overlap condition needs a second utterance".into()))?;
            overlap_mix(signal, other)
        }
    }
}
