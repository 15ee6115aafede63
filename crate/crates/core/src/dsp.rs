//! Audio frontend: WAV loading, 2-second cropping and log-mel features.
//!
//! Framing follows the centered STFT convention: the signal is reflect-padded
//! by `fft_size / 2` on both sides, a 400-sample Hann window (zero-padded to
//! 512) is applied every 160 samples, and only `len / hop` frames are kept so
//! that a 32000-sample clip produces exactly 200 frames.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// Samples in one 2-second clip at 16 kHz.
pub const CLIP_SAMPLES: usize = 32_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.win_ms > self.hop_ms && self.hop_ms > 0.0) {
            return Err(Error::Config(format!(
                "need win_ms > hop_ms > 0, got {} / {}",
                self.win_ms, self.hop_ms
            )));
        }
        if !(self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return Err(Error::Config(format!(
                "need fmin < fmax <= {nyquist}, got {} / {}",
                self.fmin_hz, self.fmax_hz
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if self.win_length(sample_rate) > self.fft_size {
            return Err(Error::Config(format!(
                "window of {} samples exceeds fft_size {}",
                self.win_length(sample_rate),
                self.fft_size
            )));
        }
        Ok(())
    }

    pub fn win_length(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_length(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// Log-mel spectrogram, `[frames × mel bins]`, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f64>,
}

impl Spectrogram {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Reads a PCM16 mono 16 kHz RIFF/WAVE file. Nothing is resampled or downmixed.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "mono required, {} has {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedAudio(format!(
            "PCM 16-bit required, {} is {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedAudio(format!(
            "{} Hz required, {} is {} Hz (no resampling is performed)",
            SAMPLE_RATE,
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(Waveform::new(samples, SAMPLE_RATE))
}

/// Writes a waveform as PCM16 mono. Samples are clamped to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Exactly [`CLIP_SAMPLES`] samples: short input is right-padded with zeros
/// (no randomness consumed), long input is cut at a uniform random offset.
pub fn crop_2s<R: Rng + ?Sized>(w: &Waveform, rng: &mut R) -> Waveform {
    crop_with_offset(w, rng).0
}

/// Like [`crop_2s`] but also reports the chosen start offset.
pub fn crop_with_offset<R: Rng + ?Sized>(w: &Waveform, rng: &mut R) -> (Waveform, usize) {
    let n = w.samples.len();
    if n <= CLIP_SAMPLES {
        let mut samples = w.samples.clone();
        samples.resize(CLIP_SAMPLES, 0.0);
        return (Waveform::new(samples, w.sample_rate), 0);
    }
    let offset = rng.gen_range(0..=n - CLIP_SAMPLES);
    let samples = w.samples[offset..offset + CLIP_SAMPLES].to_vec();
    (Waveform::new(samples, w.sample_rate), offset)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Corner frequencies of the triangular filters: `n_mels + 2` points evenly
/// spaced on the HTK mel scale. Filter `m` spans `edges[m]..edges[m + 2]`
/// and peaks at `edges[m + 1]`.
pub fn mel_band_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

/// Triangular mel filterbank, `[n_mels × (fft_size / 2 + 1)]`, unit peak height.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Array2<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let edges = mel_band_edges(cfg);
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > left && f < center {
            (f - left) / (center - left)
        } else if f >= center && f < right {
            (right - f) / (right - center)
        } else {
            0.0
        }
    })
}

/// Symmetric Hann window of `len` samples.
pub fn hann_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / denom).cos())
        .collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

/// Reusable log-mel extractor holding the FFT plan, window and filterbank.
pub struct LogMel {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Array2<f64>,
    hop: usize,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish()
    }
}

impl LogMel {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate(SAMPLE_RATE)?;
        let win = cfg.win_length(SAMPLE_RATE);
        let offset = (cfg.fft_size - win) / 2;
        let mut window = vec![0.0; cfg.fft_size];
        window[offset..offset + win].copy_from_slice(&hann_window(win));
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let filters = mel_filterbank(&cfg, SAMPLE_RATE);
        let hop = cfg.hop_length(SAMPLE_RATE);
        Ok(Self {
            cfg,
            fft,
            window,
            filters,
            hop,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn compute(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedAudio(format!(
                "{} Hz required, got {} Hz",
                SAMPLE_RATE, w.sample_rate
            )));
        }
        if let Some(bad) = w.samples.iter().find(|s| !s.is_finite()) {
            return Err(Error::UnsupportedAudio(format!("non-finite sample {bad}")));
        }
        let pad = self.cfg.fft_size / 2;
        if w.samples.len() <= pad {
            return Err(Error::UnsupportedAudio(format!(
                "{} samples is too short for one centered frame (need more than {pad})",
                w.samples.len()
            )));
        }
        let padded = reflect_pad(&w.samples, pad);
        let n_fft = self.cfg.fft_size;
        let n_bins = n_fft / 2 + 1;
        let n_frames = (w.samples.len() / self.hop).max(1);

        let mut out = Array2::zeros((n_frames, self.cfg.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let start = t * self.hop;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, filt) in self.filters.outer_iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                out[(t, m)] = (e + self.cfg.log_floor).ln();
            }
        }
        Ok(Spectrogram::new(out))
    }
}

/// One-shot log-mel; prefer [`LogMel`] when processing many clips.
pub fn logmel(w: &Waveform, cfg: &MelConfig) -> Result<Spectrogram> {
    LogMel::new(cfg.clone())?.compute(w)
}
