use std::io::Cursor;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported WAV encoding".into()),
        other => Error::Parse(format!("malformed WAV data: {other}")),
    }
}

/// Decodes a RIFF/PCM file (16-bit integer or 32-bit float, mono or stereo)
/// into a mono clip at [`SAMPLE_RATE`].
pub fn decode_pcm(bytes: &[u8]) -> Result<AudioClip> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedFormat(format!("{channels} channels")));
    }
    if spec.sample_rate == 0 {
        return Err(Error::Parse("sample rate of zero".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?} samples"
            )))
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::Parse("sample count not a multiple of channels".into()));
    }
    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|lr| 0.5 * (lr[0] + lr[1]))
            .collect()
    };
    let samples = resample_linear(&mono, spec.sample_rate, SAMPLE_RATE);
    AudioClip::new(samples, SAMPLE_RATE)
}

/// Linear-interpolation resampling; `floor(len * to / from)` output samples.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = (samples.len() as u64 * to as u64 / from as u64) as usize;
    let step = from as f64 / to as f64;
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = (pos - lo as f64) as f32;
            samples[lo] + (samples[hi] - samples[lo]) * frac
        })
        .collect()
}

/// Encodes a clip as mono 16-bit PCM.
pub fn encode_pcm16(clip: &AudioClip) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::with_capacity(44 + clip.len() * 2));
    {
        let mut w = WavWriter::new(&mut buf, spec).map_err(map_hound)?;
        let mut w16 = w.get_i16_writer(clip.len() as u32);
        for &s in clip.samples() {
            w16.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16);
        }
        w16.flush().map_err(map_hound)?;
        w.finalize().map_err(map_hound)?;
    }
    Ok(buf.into_inner())
}
