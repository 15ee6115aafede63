//! Clip-level features from a frozen encoder.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::binfmt::{read_matrix, write_matrix};
use crate::dsp::{LogMel, MelConfig, Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};

pub type FeatureVector = Array1<f64>;

/// Wraps a model and its frozen parameters. Features of identical chunks
/// are computed once and reused.
pub struct FeatureExtractor {
    model: Model,
    params: ModelParams,
    frontend: LogMel,
    cache: Mutex<HashMap<u64, FeatureVector>>,
    cache_hits: Mutex<usize>,
}

fn chunk_key(chunk: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    chunk.len().hash(&mut h);
    for v in chunk {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

impl FeatureExtractor {
    pub fn new(model: Model, params: ModelParams) -> Result<Self> {
        let frontend = LogMel::new(MelConfig::default())?;
        let cfg = model.config();
        if (cfg.input_t, cfg.input_f)
            != (
                CLIP_SAMPLES / frontend.config().hop_length(SAMPLE_RATE),
                frontend.config().n_mels,
            )
        {
            return Err(Error::Config(format!(
                "feature extraction needs a {}×{} input, model expects {}×{}",
                CLIP_SAMPLES / frontend.config().hop_length(SAMPLE_RATE),
                frontend.config().n_mels,
                cfg.input_t,
                cfg.input_f
            )));
        }
        Ok(Self {
            model,
            params,
            frontend,
            cache: Mutex::new(HashMap::new()),
            cache_hits: Mutex::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.model.config().d_model
    }

    pub fn cache_hits(&self) -> usize {
        *self.cache_hits.lock().unwrap()
    }

    /// Mean over the N patch tokens of one 2-second chunk, no masking.
    fn chunk_feature(&self, chunk: &[f64]) -> Result<FeatureVector> {
        let key = chunk_key(chunk);
        if let Some(f) = self.cache.lock().unwrap().get(&key) {
            *self.cache_hits.lock().unwrap() += 1;
            return Ok(f.clone());
        }
        let s = self.frontend.compute(&Waveform::new(chunk.to_vec(), SAMPLE_RATE))?;
        let z = self.model.encode_unmasked(&self.params, &s)?;
        let f = z
            .tokens
            .slice(ndarray::s![1.., ..])
            .mean_axis(Axis(0))
            .expect("at least one patch");
        self.cache.lock().unwrap().insert(key, f.clone());
        Ok(f)
    }

    /// Consecutive 2-second chunks (last one zero-padded), averaged.
    pub fn extract(&self, w: &Waveform) -> Result<FeatureVector> {
        if w.is_empty() {
            return Err(Error::Empty("cannot extract features from an empty waveform".into()));
        }
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedAudio(format!(
                "sample rate {} Hz, need {SAMPLE_RATE}",
                w.sample_rate
            )));
        }
        let mut sum = Array1::zeros(self.dim());
        let mut count = 0usize;
        for piece in w.samples.chunks(CLIP_SAMPLES) {
            let f = if piece.len() == CLIP_SAMPLES {
                self.chunk_feature(piece)?
            } else {
                let mut padded = piece.to_vec();
                padded.resize(CLIP_SAMPLES, 0.0);
                self.chunk_feature(&padded)?
            };
            sum += &f;
            count += 1;
        }
        Ok(sum / count as f64)
    }

    /// One row per clip, in input order; parallel over clips.
    pub fn extract_all(&self, waves: &[Waveform]) -> Result<Array2<f64>> {
        let rows: Vec<Result<FeatureVector>> = waves.par_iter().map(|w| self.extract(w)).collect();
        let mut out = Array2::zeros((waves.len(), self.dim()));
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).assign(&r?);
        }
        Ok(out)
    }
}

/// One-shot extraction without a persistent cache.
pub fn extract_features(model: &Model, params: &ModelParams, w: &Waveform) -> Result<FeatureVector> {
    FeatureExtractor::new(model.clone(), params.clone())?.extract(w)
}

pub fn ids_path(features: &Path) -> PathBuf {
    features.with_extension("ids")
}

/// Matrix in the spectrogram binary layout plus a `.ids` sidecar.
pub fn write_features(path: impl AsRef<Path>, features: &Array2<f64>, ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} ids for {} feature rows",
            ids.len(),
            features.nrows()
        )));
    }
    write_matrix(path, features)?;
    let mut text = ids.join("\n");
    text.push('\n');
    let side = ids_path(path);
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<(Array2<f64>, Vec<String>)> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    let side = ids_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let ids: Vec<String> = text.lines().map(str::to_string).collect();
    if ids.len() != m.nrows() {
        return Err(Error::Shape(format!(
            "{} ids for {} feature rows",
            ids.len(),
            m.nrows()
        )));
    }
    Ok((m, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> (Model, ModelParams) {
        let cfg = ModelConfig {
            d_model: 16,
            enc_layers: 1,
            enc_heads: 2,
            d_dec: 16,
            dec_layers: 1,
            dec_heads: 2,
            ..ModelConfig::tiny()
        };
        let m = Model::new(cfg).unwrap();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        (m, p)
    }

    fn noise(n: usize, seed: u64) -> Waveform {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| r.gen_range(-0.3..0.3)).collect(), SAMPLE_RATE)
    }

    #[test]
    fn repeated_halves_equal_single_chunk() {
        let (m, p) = tiny_model();
        let fx = FeatureExtractor::new(m, p).unwrap();
        let half = noise(CLIP_SAMPLES, 1);
        let mut twice = half.samples.clone();
        twice.extend_from_slice(&half.samples);
        let a = fx.extract(&half).unwrap();
        let b = fx.extract(&Waveform::new(twice, SAMPLE_RATE)).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        assert!(fx.cache_hits() >= 2);
    }

    #[test]
    fn silence_is_cached_and_stable() {
        let (m, p) = tiny_model();
        let fx = FeatureExtractor::new(m, p).unwrap();
        let s = Waveform::new(vec![0.0; 5000], SAMPLE_RATE);
        let a = fx.extract(&s).unwrap();
        let b = fx.extract(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(fx.cache_hits(), 1);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_token_does_not_matter() {
        let (m, mut p) = tiny_model();
        let w = noise(CLIP_SAMPLES + 100, 2);
        let a = extract_features(&m, &p, &w).unwrap();
        p.mask_token.fill(123.0);
        assert_eq!(a, extract_features(&m, &p, &w).unwrap());
    }

    #[test]
    fn empty_is_rejected() {
        let (m, p) = tiny_model();
        assert!(matches!(
            extract_features(&m, &p, &Waveform::new(vec![], SAMPLE_RATE)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let m = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.5);
        write_features(&path, &m, &["a".into(), "b".into()]).unwrap();
        let (back, ids) = read_features(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(ids, vec!["a", "b"]);
    }
}
