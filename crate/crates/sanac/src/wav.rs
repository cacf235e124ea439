//! WAV file I/O. Only 16-bit PCM mono is supported; integer samples are
//! mapped to [-1, 1) by dividing by 32768.

use std::path::Path;

use thiserror::Error;

use crate::dsp::AudioSignal;

#[derive(Error, Debug)]
pub enum WavError {
    #[error("wav read error: {0}")]
    Read(#[from] hound::Error),
    #[error("{path}: expected 16-bit PCM, got {bits} bits ({format:?})")]
    UnsupportedFormat {
        path: String,
        bits: u16,
        format: hound::SampleFormat,
    },
    #[error("{path}: expected mono, got {channels} channels")]
    NotMono { path: String, channels: u16 },
}

pub fn read_wav(path: &Path) -> Result<AudioSignal, WavError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(WavError::UnsupportedFormat {
            path: path.display().to_string(),
            bits: spec.bits_per_sample,
            format: spec.sample_format,
        });
    }
    if spec.channels != 1 {
        return Err(WavError::NotMono {
            path: path.display().to_string(),
            channels: spec.channels,
        });
    }
    let samples: Result<Vec<f64>, _> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect();
    Ok(AudioSignal {
        samples: samples?,
        sample_rate: spec.sample_rate,
    })
}

pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<(), WavError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &signal.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
