//! Raw audio to 128-bin log-mel spectrogram segments.

mod cache;
mod segment;
mod spectral;
mod wav;

pub use cache::{
    extract_dir, files_with_extension, load_log_mel, read_log_mel, save_log_mel, write_log_mel,
    CACHE_EXTENSION,
};
pub use segment::{sample_segment, segment_frames, LogMelSegment};
pub use spectral::{
    hann_window, hz_to_mel, log_mel, mel_filterbank, mel_to_hz, stft, stft_frames, MelFilterbank,
    Stft,
};
pub use wav::{decode_pcm, encode_pcm16, resample_linear};

use crate::error::{ensure, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const HOP: usize = 512;
pub const FFT_SIZE: usize = 2048;
pub const N_MELS: usize = 128;
/// Only the head of each track is analysed.
pub const MAX_SECONDS: f64 = 30.0;
pub const LOG_FLOOR: f32 = 1e-6;

/// Mono audio samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        ensure!(sample_rate > 0, Contract, "sample rate must be positive");
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `N_MELS × frames` matrix of natural-log mel energies (mel-major).
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    frames: usize,
    values: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn new(frames: usize, values: Vec<f32>) -> Result<Self> {
        ensure!(frames > 0, Dimension, "spectrogram needs at least one frame");
        ensure!(
            values.len() == N_MELS * frames,
            Dimension,
            "expected {} values for {frames} frames, got {}",
            N_MELS * frames,
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Contract,
            "log-mel values must be finite"
        );
        Ok(Self { frames, values })
    }

    pub fn bins(&self) -> usize {
        N_MELS
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn hop(&self) -> usize {
        HOP
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }

    /// Per-bin mean over time.
    pub fn bin_means(&self) -> Vec<f32> {
        self.values
            .chunks_exact(self.frames)
            .map(|row| row.iter().sum::<f32>() / self.frames as f32)
            .collect()
    }
}
