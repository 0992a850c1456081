//! On-disk log-mel cache: magic `LMEL`, `u32` bins, `u32` frames,
//! `u32` sample rate, `u32` hop, then row-major little-endian `f32` values.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{decode_pcm, log_mel, LogMelSpectrogram, HOP, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::io::ByteReader;

const MAGIC: &[u8; 4] = b"LMEL";

pub fn write_log_mel(spec: &LogMelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + spec.values().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [N_MELS as u32, spec.frames() as u32, SAMPLE_RATE, HOP as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in spec.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_log_mel(bytes: &[u8]) -> Result<LogMelSpectrogram> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a log-mel cache file (bad magic)".into()));
    }
    let (bins, frames, rate, hop) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if bins as usize != N_MELS || rate != SAMPLE_RATE || hop as usize != HOP {
        return Err(Error::Format(format!(
            "cache has {bins} bins at {rate} Hz / hop {hop}; expected {N_MELS} at {SAMPLE_RATE} / {HOP}"
        )));
    }
    let values = r.f32s(bins as usize * frames as usize)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after log-mel payload".into()));
    }
    LogMelSpectrogram::new(frames as usize, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_log_mel(spec: &LogMelSpectrogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_log_mel(spec)).map_err(|e| Error::io(path, e))
}

pub fn load_log_mel(path: impl AsRef<Path>) -> Result<LogMelSpectrogram> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_log_mel(&bytes)
}

pub const CACHE_EXTENSION: &str = "lmel";

/// Files in `dir` with extension `ext`, sorted, as `(stem, path)`.
pub fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !path.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Converts every `.wav` in `audio_dir` into `<track>.lmel` under `out_dir`.
/// Returns the number of files written.
pub fn extract_dir(audio_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<usize> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let inputs = files_with_extension(audio_dir.as_ref(), "wav")?;
    inputs.par_iter().try_for_each(|(track, path)| {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let spec = decode_pcm(&bytes)
            .and_then(|clip| log_mel(&clip))
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        save_log_mel(&spec, out_dir.join(format!("{track}.{CACHE_EXTENSION}")))
    })?;
    Ok(inputs.len())
}
