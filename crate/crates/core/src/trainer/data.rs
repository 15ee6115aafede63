//! Pretraining inputs: in-memory spectrograms, a directory of spectrogram
//! binaries, or a directory of WAV files cropped to 2 s on the fly.

use std::path::{Path, PathBuf};

use crate::binfmt::read_spectrogram;
use crate::dsp::{crop_2s, load_wav, LogMel, MelConfig, Spectrogram};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, purpose};

pub const SPECTROGRAM_EXT: &str = "lms";

pub enum DataSource {
    Memory(Vec<Spectrogram>),
    Spectrograms(Vec<PathBuf>),
    Wavs { files: Vec<PathBuf>, frontend: LogMel },
}

impl std::fmt::Debug for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Memory(v) => write!(f, "Memory({} spectrograms)", v.len()),
            DataSource::Spectrograms(v) => write!(f, "Spectrograms({} files)", v.len()),
            DataSource::Wavs { files, .. } => write!(f, "Wavs({} files)", files.len()),
        }
    }
}

/// Sorted files in `dir` with extension `ext`.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

impl DataSource {
    /// Prefers spectrogram binaries; falls back to WAV files.
    pub fn from_dir(dir: impl AsRef<Path>, mel: MelConfig) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
            ));
        }
        let specs = list_files(dir, SPECTROGRAM_EXT)?;
        if !specs.is_empty() {
            return Ok(DataSource::Spectrograms(specs));
        }
        let files = list_files(dir, "wav")?;
        if files.is_empty() {
            return Err(Error::Empty(format!(
                "{} holds no .{SPECTROGRAM_EXT} or .wav files",
                dir.display()
            )));
        }
        Ok(DataSource::Wavs {
            files,
            frontend: LogMel::new(mel)?,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            DataSource::Memory(v) => v.len(),
            DataSource::Spectrograms(v) => v.len(),
            DataSource::Wavs { files, .. } => files.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Item `idx` as seen in `epoch`; WAV crops depend on `(seed, epoch, idx)`.
    pub fn get(&self, idx: usize, seed: u64, epoch: usize) -> Result<Spectrogram> {
        match self {
            DataSource::Memory(v) => Ok(v[idx].clone()),
            DataSource::Spectrograms(v) => read_spectrogram(&v[idx]),
            DataSource::Wavs { files, frontend } => {
                let w = load_wav(&files[idx])?;
                let mut rng = derive_rng(seed, &[purpose::CROP, epoch as u64, idx as u64]);
                frontend.compute(&crop_2s(&w, &mut rng))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binfmt::write_spectrogram;
    use crate::dsp::{write_wav, Waveform, SAMPLE_RATE};
    use ndarray::Array2;

    #[test]
    fn directory_detection() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            DataSource::from_dir(dir.path(), MelConfig::default()),
            Err(Error::Empty(_))
        ));
        let w = Waveform::new(
            (0..40_000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(),
            SAMPLE_RATE,
        );
        write_wav(dir.path().join("b.wav"), &w).unwrap();
        write_wav(dir.path().join("a.wav"), &w).unwrap();
        let src = DataSource::from_dir(dir.path(), MelConfig::default()).unwrap();
        assert_eq!(src.len(), 2);
        let s = src.get(0, 1, 0).unwrap();
        assert_eq!(s.shape(), (200, 80));
        assert_eq!(s, src.get(0, 1, 0).unwrap());

        write_spectrogram(dir.path().join("x.lms"), &Spectrogram::new(Array2::zeros((200, 80)))).unwrap();
        let src = DataSource::from_dir(dir.path(), MelConfig::default()).unwrap();
        assert!(matches!(src, DataSource::Spectrograms(ref v) if v.len() == 1));
    }

    #[test]
    fn missing_dir_mentions_path() {
        let err = DataSource::from_dir("/definitely/not/here", MelConfig::default()).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here"));
    }
}
