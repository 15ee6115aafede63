//! Checkpoint file: `"AMPP"`, u32 version, u64 manifest length, JSON
//! manifest, then every tensor as little-endian f32 in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamState, OptimConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::Parameters;

pub const MAGIC: &[u8; 4] = b"AMPP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    /// Completed optimizer steps.
    pub step: u64,
    /// Base seed; all randomness is derived from it and `step`.
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams,
    pub state: AdamState<ModelParams>,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.manifest.step
    }
}

fn tensor_groups<'a>(
    params: &'a ModelParams,
    state: &'a AdamState<ModelParams>,
) -> Vec<(String, Vec<usize>, &'a [f64])> {
    let mut out: Vec<(String, Vec<usize>, &[f64])> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape, t.data))
        .collect();
    for (prefix, p) in [(M_PREFIX, &state.m), (V_PREFIX, &state.v)] {
        out.extend(
            p.tensors()
                .into_iter()
                .map(|t| (format!("{prefix}{}", t.name), t.shape, t.data)),
        );
    }
    out
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ModelConfig,
    optim: &OptimConfig,
    seed: u64,
    params: &ModelParams,
    state: &AdamState<ModelParams>,
) -> Result<()> {
    let path = path.as_ref();
    let groups = tensor_groups(params, state);
    let mut tensors = Vec::with_capacity(groups.len());
    let mut offset = 0u64;
    for (name, shape, data) in &groups {
        let nbytes = 4 * data.len() as u64;
        tensors.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: shape.clone(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let manifest = Manifest {
        model: model.clone(),
        optim: optim.clone(),
        step: state.step,
        seed,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut buf = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, data) in &groups {
        for &v in *data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    // write beside the target, then rename, so a crash never leaves half a file
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads only the header and manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing AMPP magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = HEADER_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("manifest length {len} exceeds file size")))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..end]).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    Ok((manifest, end))
}

/// Loads a checkpoint, building tensors from the config stored inside it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, _) = read_manifest(&bytes)?;
    let cfg = manifest.model.clone();
    decode(&bytes, &cfg)
}

/// Loads a checkpoint into the shapes implied by `expected`; any name or
/// shape difference is an error.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

fn decode(bytes: &[u8], cfg: &ModelConfig) -> Result<Checkpoint> {
    let (manifest, blob_start) = read_manifest(bytes)?;
    let blob = &bytes[blob_start..];

    let mut params = ModelParams::zeros(cfg);
    let mut state = AdamState::new(&params);
    state.step = manifest.step;

    let mut targets = Vec::new();
    targets.extend(params.tensors_mut().into_iter().map(|t| (t.name, t.shape, t.data)));
    for (prefix, p) in [(M_PREFIX, &mut state.m), (V_PREFIX, &mut state.v)] {
        targets.extend(
            p.tensors_mut()
                .into_iter()
                .map(|t| (format!("{prefix}{}", t.name), t.shape, t.data)),
        );
    }

    let needed = manifest.tensors.iter().map(|t| t.offset + t.nbytes).max().unwrap_or(0) as usize;
    for (entry, (name, shape, _)) in manifest.tensors.iter().zip(&targets) {
        if &entry.name != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor `{name}`, found `{}`",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(Error::CheckpointShape {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor `{name}` has dtype {}", entry.dtype)));
        }
        let count: usize = shape.iter().product();
        if entry.nbytes != 4 * count as u64 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` claims {} bytes for {count} values",
                entry.nbytes
            )));
        }
    }
    if manifest.tensors.len() != targets.len() {
        let listed: std::collections::HashSet<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        let missing = targets.iter().find(|t| !listed.contains(t.0.as_str()));
        return Err(Error::Checkpoint(match missing {
            Some((name, _, _)) => format!("tensor `{name}` is missing"),
            None => format!(
                "{} tensors listed, configuration has {}",
                manifest.tensors.len(),
                targets.len()
            ),
        }));
    }

    if blob.len() < needed {
        return Err(Error::CheckpointTruncated {
            needed,
            found: blob.len(),
        });
    }

    for (entry, (_, _, data)) in manifest.tensors.iter().zip(targets.iter_mut()) {
        let start = entry.offset as usize;
        let raw = &blob[start..start + entry.nbytes as usize];
        for (dst, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    drop(targets);

    Ok(Checkpoint {
        manifest,
        params,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            enc_layers: 1,
            enc_heads: 2,
            d_dec: 8,
            dec_layers: 1,
            dec_heads: 2,
            patch_t: 2,
            patch_f: 4,
            input_t: 4,
            input_f: 8,
            mask_ratio: 0.5,
            rope_encoder: false,
            rope_decoder: true,
            swiglu_pre_ln: true,
        }
    }

    fn sample() -> (ModelParams, AdamState<ModelParams>) {
        let model = Model::new(small()).unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let mut state = AdamState::new(&params);
        state.m = model.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        state.v = model.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        state.step = 17;
        (params, state)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ampp");
        let (params, state) = sample();
        save_checkpoint(&path, &small(), &OptimConfig::default(), 9, &params, &state).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.state, state);
        assert_eq!((back.manifest.step, back.manifest.seed), (17, 9));
    }

    #[test]
    fn manifest_lists_each_tensor_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ampp");
        let (params, state) = sample();
        save_checkpoint(&path, &small(), &OptimConfig::default(), 0, &params, &state).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let names: Vec<&str> = back.manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
        for t in params.tensors() {
            assert_eq!(names.iter().filter(|n| **n == t.name).count(), 1);
        }
        assert_eq!(names.len(), 3 * params.tensors().len());
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ampp");
        let (params, state) = sample();
        save_checkpoint(&path, &small(), &OptimConfig::default(), 0, &params, &state).unwrap();
        let bytes = fs::read(&path).unwrap();

        let wider = ModelConfig { d_model: 16, ..small() };
        assert!(matches!(
            load_checkpoint_for(&path, &wider),
            Err(Error::CheckpointShape { .. })
        ));

        let cut = dir.path().join("cut.ampp");
        fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::CheckpointTruncated { .. })));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        fs::write(&cut, &v2).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::CheckpointVersion(2))));

        let mut junk = bytes.clone();
        junk[20] = b'!';
        fs::write(&cut, &junk).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint(_))));

        fs::write(&cut, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint(_))));
    }
}
