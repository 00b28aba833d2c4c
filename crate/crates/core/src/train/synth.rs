//! Synthetic audio-visual corpus whose transcript is recoverable from the
//! video by construction.
//!
//! Each character occupies an 8-frame span. A letter lights the 32×32 cell of
//! a 4×4 grid matching its alphabet index, at a per-character brightness; a
//! space leaves the span black. The audio carries one sine tone per letter
//! and silence for spaces, sized so the stacked log-mel rows line up with the
//! video frames.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, HOP, SAMPLE_RATE, STACK, WINDOW};
use crate::error::{Error, Result};
use crate::io::{write_wav, AvtData, AvtFile};
use crate::rnnt::LabelSequence;
use crate::tensor::Tensor;
use crate::video::{VideoClip, TARGET_FPS};

pub const ALPHABET: &str = "abcdefghijklmnop";
pub const GRID: usize = 4;
pub const CELL: usize = 32;
pub const FRAME_SIZE: usize = GRID * CELL;
pub const SPAN: usize = 8;
/// Audio samples per character span (8 frames at 100/3 fps).
pub const SPAN_SAMPLES: usize = SPAN * HOP * STACK;
/// Trailing samples so the final analysis window fits.
pub const AUDIO_TAIL: usize = WINDOW - HOP;
pub const TONE_BASE_HZ: f64 = 300.0;
pub const TONE_STEP_HZ: f64 = 200.0;
pub const TONE_AMPLITUDE: f64 = 0.5;
const LEVEL_RANGE: (u8, u8) = (153, 255);
const SPACE_PROB: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub len_min: usize,
    pub len_max: usize,
    /// Allows single interior spaces, making transcripts multi-word.
    pub spaces: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            len_min: 3,
            len_max: 6,
            spaces: true,
        }
    }
}

/// Compact description of one example; [`SynthItem::render`] expands it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthItem {
    pub text: String,
    /// Brightness of each character's block in 1/255 steps (0 for spaces).
    pub levels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticAvExample {
    pub video: VideoClip,
    pub audio: Waveform,
    pub transcript: LabelSequence,
}

fn letter_index(c: char) -> Option<usize> {
    ALPHABET.find(c)
}

/// Generates `n` items. Letters never repeat back to back; spaces are
/// interior and isolated.
pub fn gen_synthetic(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<SynthItem>> {
    if n == 0 || cfg.len_min == 0 || cfg.len_min > cfg.len_max {
        return Err(Error::Config(format!("cannot generate {n} examples of length {}..={}", cfg.len_min, cfg.len_max)));
    }
    let letters: Vec<char> = ALPHABET.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|_| {
            let len = rng.gen_range(cfg.len_min..=cfg.len_max);
            let mut text = String::with_capacity(len);
            let mut levels = Vec::with_capacity(len);
            let mut prev = ' ';
            for i in 0..len {
                if cfg.spaces && i > 0 && i + 1 < len && prev != ' ' && rng.gen_bool(SPACE_PROB) {
                    prev = ' ';
                    text.push(' ');
                    levels.push(0);
                    continue;
                }
                let c = loop {
                    let c = letters[rng.gen_range(0..letters.len())];
                    if c != prev {
                        break c;
                    }
                };
                prev = c;
                text.push(c);
                levels.push(rng.gen_range(LEVEL_RANGE.0..=LEVEL_RANGE.1));
            }
            SynthItem { text, levels }
        })
        .collect();
    Ok(items)
}

impl SynthItem {
    pub fn frames(&self) -> usize {
        SPAN * self.levels.len()
    }

    pub fn transcript(&self) -> Result<LabelSequence> {
        LabelSequence::from_text(&self.text)
    }

    /// `[8L, 128, 128, 1]` frames at 100/3 fps.
    pub fn render_video(&self) -> Result<VideoClip> {
        let mut data = vec![0.0; self.frames() * FRAME_SIZE * FRAME_SIZE];
        let frame_len = FRAME_SIZE * FRAME_SIZE;
        for (i, (c, &level)) in self.text.chars().zip(&self.levels).enumerate() {
            let Some(idx) = letter_index(c) else { continue };
            let (r0, c0) = ((idx / GRID) * CELL, (idx % GRID) * CELL);
            let v = level as f64 / 255.0;
            for t in i * SPAN..(i + 1) * SPAN {
                for y in r0..r0 + CELL {
                    let row = t * frame_len + y * FRAME_SIZE;
                    data[row + c0..row + c0 + CELL].fill(v);
                }
            }
        }
        VideoClip::new(Tensor::new([self.frames(), FRAME_SIZE, FRAME_SIZE, 1], data)?, TARGET_FPS)
    }

    pub fn render_audio(&self) -> Result<Waveform> {
        let mut samples = Vec::with_capacity(self.levels.len() * SPAN_SAMPLES + AUDIO_TAIL);
        for (c, &level) in self.text.chars().zip(&self.levels) {
            match letter_index(c) {
                Some(idx) => {
                    let f = TONE_BASE_HZ + TONE_STEP_HZ * idx as f64;
                    let a = TONE_AMPLITUDE * level as f64 / 255.0;
                    samples.extend(
                        (0..SPAN_SAMPLES).map(|i| a * (std::f64::consts::TAU * f * i as f64 / SAMPLE_RATE as f64).sin()),
                    );
                }
                None => samples.extend(std::iter::repeat_n(0.0, SPAN_SAMPLES)),
            }
        }
        samples.extend(std::iter::repeat_n(0.0, AUDIO_TAIL));
        Waveform::new(samples, SAMPLE_RATE)
    }

    pub fn render(&self) -> Result<SyntheticAvExample> {
        Ok(SyntheticAvExample {
            video: self.render_video()?,
            audio: self.render_audio()?,
            transcript: self.transcript()?,
        })
    }
}

/// Inverts the generator: reads the brightest cell in the middle frame of
/// every 8-frame span.
pub fn rule_decode(clip: &VideoClip) -> Result<String> {
    let (h, w, c) = clip.frame_dims();
    if h != FRAME_SIZE || w != FRAME_SIZE || c != 1 {
        return Err(Error::dim("rule_decode", &[h, w, c], &[FRAME_SIZE, FRAME_SIZE, 1]));
    }
    let letters: Vec<char> = ALPHABET.chars().collect();
    let mut text = String::new();
    for span in 0..clip.len() / SPAN {
        let frame = clip.frame(span * SPAN + SPAN / 2);
        let mut best = (0, 0.0);
        for idx in 0..GRID * GRID {
            let (r0, c0) = ((idx / GRID) * CELL, (idx % GRID) * CELL);
            let sum: f64 = (r0..r0 + CELL).map(|y| frame[y * FRAME_SIZE + c0..y * FRAME_SIZE + c0 + CELL].iter().sum::<f64>()).sum();
            let mean = sum / (CELL * CELL) as f64;
            if mean > best.1 {
                best = (idx, mean);
            }
        }
        text.push(if best.1 > 0.25 { letters[best.0] } else { ' ' });
    }
    Ok(text)
}

/// Writes `NNNN.avt` (u8 pixels), `NNNN.wav` and `transcripts.tsv` into `dir`.
pub fn write_dataset(dir: &Path, items: &[SynthItem]) -> Result<()> {
    let io = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut index = String::new();
    for (i, item) in items.iter().enumerate() {
        let ex = item.render()?;
        let s = ex.video.frames.shape();
        let pixels = ex.video.frames.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        let avt = AvtFile {
            dims: [s[0], s[1], s[2], s[3]],
            data: AvtData::U8(pixels),
        };
        avt.write(dir.join(format!("{i:04}.avt")))?;
        write_wav(dir.join(format!("{i:04}.wav")), &ex.audio)?;
        index.push_str(&format!("{i:04}\t{}\n", item.text));
    }
    fs::write(dir.join("transcripts.tsv"), index).map_err(io)
}
