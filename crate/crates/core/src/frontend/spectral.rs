use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use super::{AudioClip, LogMelSpectrogram, FFT_SIZE, HOP, LOG_FLOOR, MAX_SECONDS, N_MELS, SAMPLE_RATE};
use crate::error::{ensure, Error, Result};
use crate::nd::Real;

/// Complex short-time Fourier transform, stored frame by frame.
#[derive(Clone, Debug)]
pub struct Stft {
    pub fft_size: usize,
    pub hop: usize,
    pub frames: usize,
    /// `frames × (fft_size/2 + 1)`, frame-major.
    data: Vec<Complex32>,
}

impl Stft {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex32 {
        self.data[frame * self.bins() + bin]
    }

    /// `|X|²`, frame-major `frames × bins`.
    pub fn power(&self) -> Vec<f32> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Periodic raised-cosine (Hann) window.
pub fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let phase = std::f64::consts::TAU * i as f64 / n as f64;
            (0.5 - 0.5 * phase.cos()) as f32
        })
        .collect()
}

pub fn stft_frames(n_samples: usize, fft_size: usize, hop: usize) -> Option<usize> {
    (n_samples >= fft_size && hop > 0).then(|| (n_samples - fft_size) / hop + 1)
}

fn plan(fft_size: usize) -> Arc<dyn Fft<f32>> {
    FftPlanner::<f32>::new().plan_fft_forward(fft_size)
}

/// Windowed STFT without centering: frame `t` covers samples
/// `[t*hop, t*hop + fft_size)`.
pub fn stft(clip: &AudioClip, fft_size: usize, hop: usize) -> Result<Stft> {
    ensure!(fft_size >= 2 && hop >= 1, Contract, "fft_size >= 2 and hop >= 1 required");
    let samples = clip.samples();
    let frames = stft_frames(samples.len(), fft_size, hop).ok_or_else(|| {
        Error::InsufficientAudio(format!(
            "{} samples is shorter than one {fft_size}-sample frame",
            samples.len()
        ))
    })?;
    let window = hann_window(fft_size);
    let fft = plan(fft_size);
    let bins = fft_size / 2 + 1;
    let mut scratch = vec![Complex32::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex32::default(); fft_size];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let frame = &samples[t * hop..t * hop + fft_size];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex32::new(s * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Stft {
        fft_size,
        hop,
        frames,
        data,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters with unit peak.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Center frequency of each filter in Hz, increasing.
    pub centers_hz: Vec<f64>,
    /// `n_mels × n_bins`, row-major.
    pub weights: Vec<f32>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f32] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Filters whose edges and centers are equally spaced on the mel scale from
/// 0 Hz to Nyquist.
pub fn mel_filterbank(sample_rate: u32, fft_size: usize, n_mels: usize) -> Result<MelFilterbank> {
    ensure!(
        n_mels >= 1 && n_mels < fft_size / 2,
        Contract,
        "n_mels ({n_mels}) must be below fft_size/2 ({})",
        fft_size / 2
    );
    let n_bins = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut weights = vec![0f32; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            weights[m * n_bins + k] = w as f32;
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        centers_hz: edges[1..=n_mels].to_vec(),
        weights,
    })
}

pub(crate) fn default_filterbank() -> &'static MelFilterbank {
    static BANK: OnceLock<MelFilterbank> = OnceLock::new();
    BANK.get_or_init(|| mel_filterbank(SAMPLE_RATE, FFT_SIZE, N_MELS).expect("valid constants"))
}

/// `ln(mel · |STFT|² + ε)` over the first 30 s of a 22050 Hz clip.
pub fn log_mel(clip: &AudioClip) -> Result<LogMelSpectrogram> {
    ensure!(
        clip.sample_rate() == SAMPLE_RATE,
        Contract,
        "log_mel expects {SAMPLE_RATE} Hz audio, got {}",
        clip.sample_rate()
    );
    let keep = clip.len().min(MAX_SECONDS as usize * SAMPLE_RATE as usize);
    let head = AudioClip::new(clip.samples()[..keep].to_vec(), SAMPLE_RATE)?;
    let spec = stft(&head, FFT_SIZE, HOP)?;
    let bank = default_filterbank();
    let power = spec.power();
    let mut values = vec![0f32; N_MELS * spec.frames];
    // [n_mels × bins] · [frames × bins]ᵀ
    f32::gemm(
        N_MELS,
        bank.n_bins,
        spec.frames,
        &bank.weights,
        false,
        &power,
        true,
        &mut values,
        0.0,
    );
    for v in &mut values {
        *v = (v.max(0.0) + LOG_FLOOR).ln();
    }
    LogMelSpectrogram::new(spec.frames, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, rate: u32) -> AudioClip {
        let n = (seconds * rate as f64) as usize;
        let s = (0..n)
            .map(|i| (0.5 * (std::f64::consts::TAU * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioClip::new(s, rate).unwrap()
    }

    #[test]
    fn frame_counts_follow_the_framing_formula() {
        for (secs, expect) in [(30usize, 1288usize), (10, 427), (3, 126)] {
            let clip = AudioClip::new(vec![0.0; secs * 22050], 22050).unwrap();
            assert_eq!(stft(&clip, 2048, 512).unwrap().frames, expect);
        }
    }

    #[test]
    fn zero_input_has_zero_magnitude() {
        let clip = AudioClip::new(vec![0.0; 5000], 22050).unwrap();
        let s = stft(&clip, 2048, 512).unwrap();
        assert!(s.power().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 2047], 22050).unwrap();
        assert!(matches!(stft(&clip, 2048, 512), Err(Error::InsufficientAudio(_))));
    }

    #[test]
    fn filter_rows_are_nonnegative_and_contiguous() {
        let bank = mel_filterbank(22050, 2048, 128).unwrap();
        for m in 0..bank.n_mels {
            let row = bank.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let support: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            assert!(!support.is_empty(), "filter {m} is empty");
            assert_eq!(support.last().unwrap() - support[0] + 1, support.len());
        }
        assert!(bank.centers_hz.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn filters_cover_every_bin_between_first_and_last_center() {
        let bank = mel_filterbank(22050, 2048, 128).unwrap();
        let bin_hz = 22050.0 / 2048.0;
        let (first, last) = (bank.centers_hz[0], bank.centers_hz[127]);
        for k in 0..bank.n_bins {
            let f = k as f64 * bin_hz;
            if f >= first && f <= last {
                let total: f32 = (0..128).map(|m| bank.row(m)[k]).sum();
                assert!(total > 0.0, "bin {k} ({f} Hz) uncovered");
            }
        }
    }

    #[test]
    fn silence_sits_on_the_log_floor() {
        let clip = AudioClip::new(vec![0.0; 22050], 22050).unwrap();
        let lm = log_mel(&clip).unwrap();
        let floor = (1e-6f32).ln();
        assert!(lm.values().iter().all(|&v| (v - floor).abs() < 1e-4));
        assert!((floor + 13.8155).abs() < 1e-3);
    }

    #[test]
    fn sine_peaks_at_nearest_mel_center() {
        let lm = log_mel(&sine(440.0, 1.0, 22050)).unwrap();
        let bank = default_filterbank();
        let nearest = (0..128)
            .min_by(|&a, &b| {
                (bank.centers_hz[a] - 440.0)
                    .abs()
                    .total_cmp(&(bank.centers_hz[b] - 440.0).abs())
            })
            .unwrap();
        for t in 0..lm.frames() {
            let col: Vec<f32> = (0..128).map(|b| lm.get(b, t)).collect();
            let argmax = (0..128).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn audio_beyond_thirty_seconds_is_ignored() {
        let mut s: Vec<f32> = (0..30 * 22050).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect();
        let base = log_mel(&AudioClip::new(s.clone(), 22050).unwrap()).unwrap();
        s.extend((0..22050).map(|i| (i as f32 * 0.01).sin()));
        let longer = log_mel(&AudioClip::new(s, 22050).unwrap()).unwrap();
        assert_eq!(base, longer);
        assert_eq!(base.frames(), 1288);
    }
}
