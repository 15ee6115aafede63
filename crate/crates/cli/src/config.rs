//! Run configuration: built-in defaults, then a preset, then the TOML file,
//! then command-line flags. The resolved result is echoed into every run
//! directory.

use std::path::{Path, PathBuf};

use ampp_core::evalkit::ProbeConfig;
use ampp_core::model::{ModelConfig, Preset};
use ampp_core::trainer::OptimConfig;
use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "AMPP_SEED";
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub preset: Option<Preset>,
    pub model: Option<toml::Table>,
    pub optim: Option<toml::Table>,
    pub probe: Option<toml::Table>,
    #[serde(default)]
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub threads: Option<usize>,
    pub preset: Preset,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub probe: ProbeConfig,
    pub paths: Paths,
}

/// Flags shared by commands that build a model.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ModelFlags {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// tiny | base | large
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Rotary embeddings in the encoder.
    #[arg(long)]
    pub rope_encoder: bool,
    /// Rotary embeddings in the decoder.
    #[arg(long)]
    pub rope_decoder: bool,
    /// Decoder width (heads follow as width/64).
    #[arg(long)]
    pub dec_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for data loading and extraction.
    #[arg(long)]
    pub threads: Option<usize>,
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: Option<&toml::Table>, section: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).with_context(|| format!("serializing [{section}] defaults"))?;
    if let Some(over) = over {
        for (k, v) in over {
            if !table.contains_key(k) {
                bail!("unknown key `{k}` in [{section}]");
            }
            table.insert(k.clone(), v.clone());
        }
    }
    toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("invalid value in [{section}]"))
}

pub fn read_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            Ok(Some(s.trim().parse().with_context(|| {
                format!("{SEED_ENV}={s} is not an unsigned integer")
            })?))
        }
        Err(_) => Ok(None),
    }
}

pub fn resolve(flags: &ModelFlags) -> Result<Resolved> {
    let file = match &flags.config {
        Some(p) => read_file(p)?,
        None => FileConfig::default(),
    };
    let preset = flags.preset.or(file.preset).unwrap_or(Preset::Tiny);
    let mut model = overlay(&ModelConfig::preset(preset), file.model.as_ref(), "model")?;
    if flags.rope_encoder {
        model.rope_encoder = true;
    }
    if flags.rope_decoder {
        model.rope_decoder = true;
    }
    if let Some(d) = flags.dec_dim {
        model = model.with_decoder_width(d);
    }
    model.validate()?;

    let optim = overlay(&OptimConfig::default(), file.optim.as_ref(), "optim")?;
    let mut probe = overlay(&ProbeConfig::default(), file.probe.as_ref(), "probe")?;
    let seed = match flags.seed.or(file.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    probe.seed = seed;
    Ok(Resolved {
        seed,
        threads: flags.threads.or(file.threads),
        preset,
        model,
        optim,
        probe,
        paths: file.paths,
    })
}

pub fn echo(resolved: &Resolved, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = toml::to_string_pretty(resolved).context("serializing resolved config")?;
    let path = dir.join(ECHO_FILE);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
