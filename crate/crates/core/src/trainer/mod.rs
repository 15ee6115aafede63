//! Optimization, the pretraining loop, checkpoints and gradient checks.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod optim;
pub mod pretrain;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, Manifest, TensorEntry};
pub use data::DataSource;
pub use gradcheck::{grad_check, small_check_config, GradCheckOptions, GradCheckReport, TensorCheck};
pub use optim::{adamw_step, lr_at, AdamState, OptimConfig};
pub use pretrain::{pretrain, run, PretrainOptions, StepRecord, Trainer};
