use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{stft_frames, LogMelSpectrogram, FFT_SIZE, HOP, MAX_SECONDS, N_MELS, SAMPLE_RATE};
use crate::error::{ensure, Error, Result};
use crate::nd::Tensor;

/// A fixed-length window of a log-mel spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSegment {
    values: Vec<f32>,
    frames: usize,
    pub context_duration: f64,
    pub source_offset: usize,
}

impl LogMelSegment {
    /// Wraps raw `N_MELS × frames` values (mel-major).
    pub fn from_values(values: Vec<f32>, context_duration: f64) -> Result<Self> {
        ensure!(
            !values.is_empty() && values.len().is_multiple_of(N_MELS),
            Dimension,
            "segment values must be a multiple of {N_MELS}"
        );
        let frames = values.len() / N_MELS;
        Ok(Self {
            values,
            frames,
            context_duration,
            source_offset: 0,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `[1, N_MELS, frames]` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, N_MELS, self.frames], self.values.clone()).expect("consistent shape")
    }
}

/// Number of STFT frames covering `context_duration` seconds.
pub fn segment_frames(context_duration: f64) -> Result<usize> {
    ensure!(
        context_duration > 0.0 && context_duration <= MAX_SECONDS,
        Contract,
        "context duration {context_duration} s outside (0, {MAX_SECONDS}]"
    );
    let samples = (context_duration * SAMPLE_RATE as f64).floor() as usize;
    stft_frames(samples, FFT_SIZE, HOP).ok_or_else(|| {
        Error::Contract(format!(
            "context duration {context_duration} s is shorter than one analysis frame"
        ))
    })
}

fn frames_30s() -> usize {
    segment_frames(MAX_SECONDS).expect("30 s is valid")
}

/// Cuts a window of `segment_frames(context_duration)` frames starting at an
/// offset drawn uniformly from the valid range inside the first 30 s.
pub fn sample_segment(
    spec: &LogMelSpectrogram,
    context_duration: f64,
    rng_seed: u64,
) -> Result<LogMelSegment> {
    let width = segment_frames(context_duration)?;
    let available = spec.frames().min(frames_30s());
    if available < width {
        return Err(Error::InsufficientAudio(format!(
            "spectrogram has {} frames, context needs {width}",
            spec.frames()
        )));
    }
    let offset = ChaCha8Rng::seed_from_u64(rng_seed).random_range(0..=available - width);
    Ok(cut(spec, offset, width, context_duration))
}

pub(crate) fn cut(
    spec: &LogMelSpectrogram,
    offset: usize,
    width: usize,
    context_duration: f64,
) -> LogMelSegment {
    let mut values = Vec::with_capacity(N_MELS * width);
    for row in spec.values().chunks_exact(spec.frames()) {
        values.extend_from_slice(&row[offset..offset + width]);
    }
    LogMelSegment {
        values,
        frames: width,
        context_duration,
        source_offset: offset,
    }
}
