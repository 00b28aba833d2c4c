use std::path::Path;

use hound::{SampleFormat, WavSpec};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn expected_spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

/// Reads 16-bit signed PCM, mono, 16 kHz. Anything else is a format error.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec != expected_spec() {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM mono {SAMPLE_RATE} Hz, found {}-bit {:?} with {} channel(s) at {} Hz",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format,
            spec.channels,
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, SAMPLE_RATE)
}

/// Writes 16-bit PCM; samples are clipped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let mut writer = hound::WavWriter::create(path, expected_spec())?;
    for &s in &wave.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
