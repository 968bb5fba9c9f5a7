//! WAV ingestion and emission: 16-bit PCM and 32-bit float, mono.
//!
//! Multi-channel inputs are downmixed by averaging. When a target sample
//! rate is requested and the file differs, samples are resampled by linear
//! interpolation (lossy; adequate for noise banks and user corpora, not
//! for precision round-trips).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    PcmI16,
    Float32,
}

pub fn read_wav(path: &Path, target_rate: Option<u32>) -> Result<Waveform> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Data(format!("{}: zero channels", path.display())));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported wav format {:?}/{} bits",
                path.display(),
                fmt,
                bits
            )))
        }
    };

    let frames = interleaved.len() / channels;
    let mut mono = Vec::with_capacity(frames);
    for f in 0..frames {
        let sum: f64 = interleaved[f * channels..(f + 1) * channels].iter().sum();
        mono.push(sum / channels as f64);
    }

    let wave = Waveform::new(mono, spec.sample_rate)?;
    match target_rate {
        Some(rate) if rate != wave.sample_rate => Ok(resample_linear(&wave, rate)),
        _ => Ok(wave),
    }
}

pub fn write_wav(path: &Path, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::PcmI16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::PcmI16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    match encoding {
        WavEncoding::PcmI16 => {
            for &s in &wave.samples {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)?;
            }
        }
        WavEncoding::Float32 => {
            for &s in &wave.samples {
                writer.write_sample(s as f32)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

fn resample_linear(wave: &Waveform, target_rate: u32) -> Waveform {
    let ratio = wave.sample_rate as f64 / target_rate as f64;
    let out_len = ((wave.len() as f64) / ratio).floor() as usize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let x = j as f64 * ratio;
        let i = x.floor() as usize;
        let frac = x - i as f64;
        let a = wave.samples[i.min(wave.len() - 1)];
        let b = wave.samples[(i + 1).min(wave.len() - 1)];
        out.push(a + frac * (b - a));
    }
    Waveform { samples: out, sample_rate: target_rate }
}
