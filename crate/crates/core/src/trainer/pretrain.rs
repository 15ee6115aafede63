//! The pretraining loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::checkpoint::{save_checkpoint, Checkpoint, Manifest};
use super::data::DataSource;
use super::optim::{adamw_step, lr_at, AdamState, OptimConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::params::Parameters;
use crate::rng::{derive_rng, purpose};

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ampp";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean masked MSE of the batch before the update.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub seed: u64,
    /// Stop after this many total steps instead of the end of the schedule.
    pub max_steps: Option<usize>,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Receives checkpoints and the CSV log; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Draw each sample's mask once and reuse it every step.
    pub fixed_masks: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_steps: None,
            checkpoint_every: 0,
            out_dir: None,
            fixed_masks: false,
        }
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:08}.ampp")
}

pub struct Trainer<'a> {
    model: Model,
    optim: OptimConfig,
    data: &'a DataSource,
    seed: u64,
    fixed_masks: bool,
    params: ModelParams,
    state: AdamState<ModelParams>,
}

/// `steps_per_epoch` follows from the dataset size and batch size.
pub fn fit_to_data(optim: &OptimConfig, n: usize) -> OptimConfig {
    let batch = optim.batch_size.min(n).max(1);
    OptimConfig {
        steps_per_epoch: n.div_ceil(batch).max(1),
        ..optim.clone()
    }
}

impl<'a> Trainer<'a> {
    pub fn new(
        model_cfg: ModelConfig,
        optim: OptimConfig,
        data: &'a DataSource,
        seed: u64,
        fixed_masks: bool,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("training set has no items".into()));
        }
        let optim = fit_to_data(&optim, data.len());
        optim.validate()?;
        let model = Model::new(model_cfg)?;
        let params = model.init_params(&mut derive_rng(seed, &[purpose::INIT]));
        let state = AdamState::new(&params);
        Ok(Self {
            model,
            optim,
            data,
            seed,
            fixed_masks,
            params,
            state,
        })
    }

    pub fn resume(ckpt: Checkpoint, data: &'a DataSource, fixed_masks: bool) -> Result<Self> {
        let Checkpoint {
            manifest,
            params,
            state,
            ..
        } = ckpt;
        let fitted = fit_to_data(&manifest.optim, data.len());
        if fitted.steps_per_epoch != manifest.optim.steps_per_epoch {
            return Err(Error::Config(format!(
                "checkpoint was trained with {} steps per epoch, this dataset gives {}",
                manifest.optim.steps_per_epoch, fitted.steps_per_epoch
            )));
        }
        Ok(Self {
            model: Model::new(manifest.model)?,
            optim: manifest.optim,
            data,
            seed: manifest.seed,
            fixed_masks,
            params,
            state,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &AdamState<ModelParams> {
        &self.state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Steps completed so far.
    pub fn step_index(&self) -> usize {
        self.state.step as usize
    }

    /// Dataset indices making up batch `step`, reshuffled every epoch.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.data.len();
        let batch = self.optim.batch_size.min(n);
        let epoch = step / self.optim.steps_per_epoch;
        let b = step % self.optim.steps_per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(self.seed, &[purpose::SHUFFLE, epoch as u64]));
        let start = b * batch;
        order[start.min(n)..(start + batch).min(n)].to_vec()
    }

    fn mask_keys(&self, step: usize, idx: usize) -> Vec<u64> {
        if self.fixed_masks {
            vec![purpose::MASK, idx as u64]
        } else {
            vec![purpose::MASK, step as u64, idx as u64]
        }
    }

    /// Mean loss and gradient over one batch. Per-sample work runs in
    /// parallel; the reduction is always sequential in batch order.
    pub fn batch_loss_and_grad(&self, step: usize) -> Result<(f64, ModelParams)> {
        let indices = self.batch_indices(step);
        let epoch = step / self.optim.steps_per_epoch;
        let chunk = rayon::current_num_threads().max(1);
        let mut total = 0.0;
        let mut grad = self.params.zeros_like();
        for group in indices.chunks(chunk) {
            let results: Vec<Result<(f64, ModelParams)>> = group
                .par_iter()
                .map(|&idx| {
                    let s = self.data.get(idx, self.seed, epoch)?;
                    let spec = crate::masking::sample_mask(
                        self.model.grid().n_patches(),
                        self.model.config().mask_ratio,
                        &mut derive_rng(self.seed, &self.mask_keys(step, idx)),
                    )?;
                    let (out, g) = self.model.loss_and_grad(&self.params, &s, spec)?;
                    Ok((out.loss, g))
                })
                .collect();
            for r in results {
                let (loss, g) = r?;
                total += loss;
                grad.accumulate(&g);
            }
        }
        let scale = 1.0 / indices.len() as f64;
        grad.scale(scale);
        Ok((total * scale, grad))
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step_index();
        let lr = lr_at(step, &self.optim);
        let (loss, grad) = self.batch_loss_and_grad(step)?;
        adamw_step(&mut self.params, &grad, &mut self.state, lr, &self.optim)?;
        Ok(StepRecord {
            step,
            epoch: step / self.optim.steps_per_epoch,
            lr,
            loss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(
            path,
            self.model.config(),
            &self.optim,
            self.seed,
            &self.params,
            &self.state,
        )
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        let tensors = Vec::new();
        Checkpoint {
            manifest: Manifest {
                model: self.model.config().clone(),
                optim: self.optim,
                step: self.state.step,
                seed: self.seed,
                tensors,
            },
            params: self.params,
            state: self.state,
        }
    }
}

fn append_log(path: &Path, rows: &[StepRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("step,epoch,lr,loss\n");
    }
    for r in rows {
        text.push_str(&format!("{},{},{:e},{:e}\n", r.step, r.epoch, r.lr, r.loss));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs (or continues) training until the schedule ends or `max_steps`.
pub fn run(trainer: &mut Trainer<'_>, opts: &PretrainOptions) -> Result<Vec<StepRecord>> {
    let end = opts
        .max_steps
        .unwrap_or(trainer.optim.total_steps())
        .min(trainer.optim.total_steps());
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::new();
    while trainer.step_index() < end {
        let rec = trainer.train_step()?;
        if let Some(dir) = &opts.out_dir {
            append_log(&dir.join(LOG_FILE), std::slice::from_ref(&rec))?;
            let done = trainer.step_index();
            if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 {
                trainer.save(dir.join(checkpoint_name(done)))?;
            }
        }
        records.push(rec);
    }
    if let Some(dir) = &opts.out_dir {
        trainer.save(dir.join(LAST_CHECKPOINT))?;
    }
    Ok(records)
}

/// Fresh run from seed: init, train, checkpoint.
pub fn pretrain(
    data: &DataSource,
    model_cfg: &ModelConfig,
    optim_cfg: &OptimConfig,
    opts: &PretrainOptions,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(model_cfg.clone(), optim_cfg.clone(), data, opts.seed, opts.fixed_masks)?;
    let records = run(&mut trainer, opts)?;
    Ok((trainer.into_checkpoint(), records))
}
