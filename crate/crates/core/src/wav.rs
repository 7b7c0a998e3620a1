//! Mono 16 kHz WAV input/output. Other layouts are rejected, never resampled.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    Error::Wav {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a mono 16 kHz file stored as 16-bit PCM or 32-bit float.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::data(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::data(format!(
            "{}: expected {SAMPLE_RATE} Hz, found {} Hz (resampling is not supported)",
            path.display(),
            spec.sample_rate
        )));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0).map_err(|e| wav_err(path, e)))
            .collect(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from).map_err(|e| wav_err(path, e)))
            .collect(),
        (fmt, bits) => Err(Error::data(format!(
            "{}: unsupported sample format {fmt:?}/{bits} bit (need 16-bit PCM or 32-bit float)",
            path.display()
        ))),
    }
}

pub fn encode_wav(samples: &[f64], format: SampleFormat) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: match format {
            SampleFormat::Pcm16 => 16,
            SampleFormat::Float32 => 32,
        },
        sample_format: match format {
            SampleFormat::Pcm16 => hound::SampleFormat::Int,
            SampleFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut buf = Cursor::new(Vec::new());
    let map = |e| wav_err(Path::new("<memory>"), e);
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(map)?;
        for &s in samples {
            match format {
                SampleFormat::Pcm16 => {
                    let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    w.write_sample(v).map_err(map)?;
                }
                SampleFormat::Float32 => w.write_sample(s as f32).map_err(map)?,
            }
        }
        w.finalize().map_err(map)?;
    }
    Ok(buf.into_inner())
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], format: SampleFormat) -> Result<()> {
    write_atomic(path, &encode_wav(samples, format)?)
}
