mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ampp_core::dsp::{load_wav, write_wav, MelConfig, Waveform};
use ampp_core::evalkit::features::ids_path;
use ampp_core::evalkit::probe::{default_metric, holdout_split};
use ampp_core::evalkit::score::{append_metrics, format_scores, read_metrics};
use ampp_core::evalkit::{aggregate_score, eval_probe, read_features, train_probe, write_features};
use ampp_core::evalkit::{FeatureExtractor, Labels, LossMode, MetricRow, ScoreTable};
use ampp_core::model::{param_count, Model, Scope};
use ampp_core::rng::{derive_rng, purpose};
use ampp_core::synth;
use ampp_core::trainer::data::list_files;
use ampp_core::trainer::pretrain::LAST_CHECKPOINT;
use ampp_core::trainer::{load_checkpoint, load_checkpoint_for, run, DataSource, PretrainOptions, Trainer};
use ampp_core::verify::{format_table, run_all, VerifyOptions};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;

use config::{echo, resolve, ModelFlags};

const FEATURES_FILE: &str = "features.bin";
const METRICS_FILE: &str = "metrics.csv";
const SCORES_FILE: &str = "scores.csv";
const LABELS_FILE: &str = "labels.csv";
const PARAM_TOLERANCE: f64 = 0.015;

#[derive(Parser)]
#[command(
    name = "ampp",
    version,
    about = "Masked spectrogram autoencoder: pretrain, extract, probe, score, verify"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain on a directory of .wav or .lms files.
    Pretrain(PretrainArgs),
    /// Mean-pooled encoder features for every .wav in a directory.
    Extract(ExtractArgs),
    /// Train an MLP probe on extracted features and record its test metric.
    Probe(ProbeArgs),
    /// Aggregate per-task metrics into one normalized score per model.
    Score(ScoreArgs),
    /// Run the invariant suite and print a pass/fail table.
    Verify(VerifyArgs),
    /// Write the bundled synthetic audio (toy set or a labelled task).
    Synth(SynthArgs),
}

#[derive(clap::Args)]
struct PretrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop after this many steps; also sets the schedule length when
    /// `--epochs` is absent.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate; defaults to the batch-scaled reference value.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Reuse one mask per sample at every step.
    #[arg(long)]
    fixed_masks: bool,
}

#[derive(clap::Args)]
struct ExtractArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use freshly initialized weights instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    random_init: bool,
    #[arg(long)]
    wavs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ProbeArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    features: PathBuf,
    /// CSV with `id,label`; multiple labels per clip separated by `;`.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Name recorded in the metrics table.
    #[arg(long = "model", default_value = "model")]
    model_name: String,
    #[arg(long, default_value = "task")]
    task: String,
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    /// Permute labels before training (null-model control).
    #[arg(long)]
    shuffle_labels: bool,
}

#[derive(clap::Args)]
struct ScoreArgs {
    /// CSV with `model,task,metric_value`.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// `toy` or one of the probe tasks.
    #[arg(long, default_value = "toy")]
    kind: String,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn report_params(model: &ampp_core::model::ModelConfig, preset: ampp_core::model::Preset) {
    let enc = param_count(model, Scope::Encoder);
    let full = param_count(model, Scope::Full);
    println!("encoder params {enc} ({:.1}M), with decoder {full}", enc as f64 / 1e6);
    if *model == ampp_core::model::ModelConfig::preset(preset).with_decoder_width(model.d_dec) {
        let reference = preset.reference_encoder_params();
        let rel = (enc as f64 - reference).abs() / reference;
        if rel > PARAM_TOLERANCE {
            eprintln!(
                "warning: {preset:?} encoder has {enc} params, {:.2}% away from the reference {reference:.0}",
                rel * 100.0
            );
        }
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<ExitCode> {
    let mut r = resolve(&a.model)?;
    set_threads(r.threads)?;
    let data_dir = a
        .data
        .or(r.paths.data.clone())
        .context("no data directory (--data or [paths] data)")?;
    let out = a
        .out
        .or(r.paths.out.clone())
        .context("no output directory (--out or [paths] out)")?;
    let resumed = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("resuming from {}", path.display()))?;
            r.model = ckpt.manifest.model.clone();
            r.seed = ckpt.manifest.seed;
            Some(ckpt)
        }
        None => None,
    };
    report_params(&r.model, r.preset);
    let data = DataSource::from_dir(&data_dir, MelConfig::default())
        .with_context(|| format!("loading data from {}", data_dir.display()))?;

    let mut trainer = match resumed {
        Some(ckpt) => Trainer::resume(ckpt, &data, a.fixed_masks)?,
        None => {
            if let Some(b) = a.batch_size {
                r.optim.peak_lr *= b as f64 / r.optim.batch_size as f64;
                r.optim.batch_size = b;
            }
            if let Some(lr) = a.lr {
                r.optim.peak_lr = lr;
            }
            let spe = data.len().div_ceil(r.optim.batch_size.min(data.len()).max(1));
            match (a.epochs, a.steps) {
                (Some(e), _) => r.optim.epochs = e,
                (None, Some(s)) => r.optim.epochs = s.div_ceil(spe).max(1),
                _ => {}
            }
            if let Some(w) = a.warmup_epochs {
                r.optim.warmup_epochs = w;
            } else if a.epochs.is_some() || a.steps.is_some() {
                r.optim.warmup_epochs = r.optim.warmup_epochs.min(r.optim.epochs / 10);
            }
            Trainer::new(r.model.clone(), r.optim.clone(), &data, r.seed, a.fixed_masks)?
        }
    };
    r.optim = trainer.optim().clone();
    r.paths.data = Some(data_dir);
    r.paths.out = Some(out.clone());
    echo(&r, &out)?;

    let opts = PretrainOptions {
        seed: r.seed,
        max_steps: a.steps,
        checkpoint_every: a.checkpoint_every,
        out_dir: Some(out.clone()),
        fixed_masks: a.fixed_masks,
    };
    let records = run(&mut trainer, &opts)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!(
            "steps {}..{} loss {:.4} -> {:.4} (ratio {:.4})",
            first.step,
            last.step,
            first.loss,
            last.loss,
            last.loss / first.loss
        );
    }
    println!("checkpoint {}", out.join(LAST_CHECKPOINT).display());
    Ok(ExitCode::SUCCESS)
}

fn wav_dir(dir: &Path) -> Result<(Vec<String>, Vec<Waveform>)> {
    let files = list_files(dir, "wav").with_context(|| format!("listing {}", dir.display()))?;
    if files.is_empty() {
        bail!("{} holds no .wav files", dir.display());
    }
    let mut ids = Vec::new();
    let mut waves = Vec::new();
    for f in files {
        ids.push(f.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        waves.push(load_wav(&f)?);
    }
    Ok((ids, waves))
}

fn cmd_extract(a: ExtractArgs) -> Result<ExitCode> {
    let mut r = resolve(&a.model)?;
    set_threads(r.threads)?;
    let params = match (&a.checkpoint, a.random_init) {
        (Some(path), _) => {
            let explicit = a.model.config.is_some() || a.model.preset.is_some();
            let ckpt = if explicit {
                load_checkpoint_for(path, &r.model)
            } else {
                load_checkpoint(path)
            }
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
            r.model = ckpt.manifest.model.clone();
            r.paths.checkpoint = Some(path.clone());
            ckpt.params
        }
        (None, true) => Model::new(r.model.clone())?.init_params(&mut derive_rng(r.seed, &[purpose::INIT])),
        (None, false) => bail!("pass --checkpoint or --random-init"),
    };
    let model = Model::new(r.model.clone())?;
    let (ids, waves) = wav_dir(&a.wavs)?;
    let fx = FeatureExtractor::new(model, params)?;
    let features = fx.extract_all(&waves)?;
    r.paths.data = Some(a.wavs.clone());
    r.paths.out = Some(a.out.clone());
    echo(&r, &a.out)?;
    let path = a.out.join(FEATURES_FILE);
    write_features(&path, &features, &ids)?;
    println!(
        "{} clips x {} dims -> {} (+ {})",
        features.nrows(),
        features.ncols(),
        path.display(),
        ids_path(&path).display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Parses `id,label` rows (header optional) and aligns them with `ids`.
fn read_labels(path: &Path, ids: &[String]) -> Result<(Labels, Vec<String>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading labels {}", path.display()))?;
    let mut by_id = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.eq_ignore_ascii_case("id,label")) {
            continue;
        }
        let Some((id, label)) = line.split_once(',') else {
            bail!("{}:{}: expected `id,label`", path.display(), n + 1);
        };
        let tags: Vec<String> = label
            .split(';')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        if tags.is_empty() || label.contains(',') {
            bail!("{}:{}: malformed label `{label}`", path.display(), n + 1);
        }
        if by_id.insert(id.trim().to_string(), tags).is_some() {
            bail!("{}:{}: duplicate id `{id}`", path.display(), n + 1);
        }
    }
    let mut names: Vec<String> = by_id.values().flatten().cloned().collect();
    names.sort();
    names.dedup();
    let index = |t: &String| names.binary_search(t).unwrap_or_default();
    let rows: Vec<&Vec<String>> = ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .with_context(|| format!("no label for `{id}` in {}", path.display()))
        })
        .collect::<Result<_>>()?;
    let multi = rows.iter().any(|t| t.len() > 1);
    let labels = if multi {
        let mut m = ndarray::Array2::zeros((rows.len(), names.len()));
        for (i, tags) in rows.iter().enumerate() {
            for t in tags.iter() {
                m[[i, index(t)]] = 1.0;
            }
        }
        Labels::Multi(m)
    } else {
        Labels::Single {
            classes: names.len(),
            y: rows.iter().map(|t| index(&t[0])).collect(),
        }
    };
    Ok((labels, names))
}

fn cmd_probe(a: ProbeArgs) -> Result<ExitCode> {
    let mut r = resolve(&a.model)?;
    set_threads(r.threads)?;
    let (features, ids) = read_features(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    let (mut labels, names) = read_labels(&a.labels, &ids)?;
    if matches!(labels, Labels::Multi(_)) {
        r.probe.loss = LossMode::Bce;
    }
    if a.shuffle_labels {
        let mut rng = derive_rng(r.seed, &[purpose::PROBE, 1]);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        labels = labels.subset(&order);
    }
    let (train, test) = holdout_split(&labels, a.test_fraction, r.seed);
    let probe = train_probe(
        features.select(ndarray::Axis(0), &train).view(),
        &labels.subset(&train),
        &r.probe,
    )?;
    let metric = default_metric(&labels);
    let value = eval_probe(
        &probe,
        features.select(ndarray::Axis(0), &test).view(),
        &labels.subset(&test),
        metric,
    )?;
    echo(&r, &a.out)?;
    let path = a.out.join(METRICS_FILE);
    append_metrics(
        &path,
        &[MetricRow {
            model: a.model_name.clone(),
            task: a.task.clone(),
            metric_value: value,
        }],
    )?;
    println!(
        "{} {} {} = {value:.4} ({} classes, {} train / {} test, lr {:.1e}) -> {}",
        a.model_name,
        a.task,
        metric.name(),
        names.len(),
        train.len(),
        test.len(),
        probe.lr,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_score(a: ScoreArgs) -> Result<ExitCode> {
    let rows = read_metrics(&a.metrics).with_context(|| format!("reading {}", a.metrics.display()))?;
    let scores = aggregate_score(&ScoreTable::from_rows(&rows)?)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let text = format_scores(&scores);
    let path = a.out.join(SCORES_FILE);
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let checks = run_all(&VerifyOptions {
        gradcheck_tolerance: a.tolerance,
        seed: a.seed,
    })?;
    print!("{}", format_table(&checks));
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (clips, labels): (Vec<(String, Waveform)>, Option<Vec<(String, String)>>) = if a.kind == "toy" {
        (synth::toy_set(a.seed), None)
    } else {
        let task = synth::task_by_name(&a.kind, a.per_class, a.seed)
            .with_context(|| format!("unknown kind `{}` (toy, {})", a.kind, synth::TASK_NAMES.join(", ")))?;
        let labels = task
            .clips
            .iter()
            .map(|c| (c.id.clone(), format!("c{}", c.label)))
            .collect();
        (task.clips.into_iter().map(|c| (c.id, c.wave)).collect(), Some(labels))
    };
    for (id, w) in &clips {
        write_wav(a.out.join(format!("{id}.wav")), w)?;
    }
    if let Some(labels) = labels {
        let mut text = String::from("id,label\n");
        for (id, l) in labels {
            text.push_str(&format!("{id},{l}\n"));
        }
        let path = a.out.join(LABELS_FILE);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{} clips -> {}", clips.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Extract(a) => cmd_extract(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg.push_str(if msg.is_empty() { "" } else { ": " });
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
