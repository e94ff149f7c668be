//! SGD with momentum, the step learning-rate schedule, the epoch loop,
//! checkpoints, and the eight-experiment runner.

mod checkpoint;
mod experiments;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use experiments::{run_experiments, ExperimentRun, ExperimentsOutcome};
pub use run::{evaluate, resume_run, train_run, EvalResult, Progress, TrainOptions, TrainOutcome};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::Param;
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub decay_period_epochs: usize,
    pub momentum: f64,
    pub workers: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Run training samples through the augmentation pipeline.
    pub augment: bool,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 40,
            initial_lr: 0.02,
            lr_decay: 0.1,
            decay_period_epochs: 15,
            momentum: 0.9,
            workers: 10,
            seed: 42,
            augment: true,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("train.{msg}")));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return fail(format!("initial_lr = {} must be positive", self.initial_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum = {} must be in [0, 1)", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay = {} must be in (0, 1]", self.lr_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 || self.decay_period_epochs == 0 {
            return fail("epochs, batch_size, workers and decay_period_epochs must be at least 1".into());
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_grad_norm must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus root with `happy/` and `sad/` subdirectories.
    pub root: Option<PathBuf>,
    pub val_frac: f64,
    /// Seeds the stratified split.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            val_frac: 0.2,
            seed: 42,
        }
    }
}

/// Everything that defines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if !(0.0..1.0).contains(&self.data.val_frac) {
            return Err(Error::Config(format!(
                "data.val_frac = {} must be in [0, 1)",
                self.data.val_frac
            )));
        }
        Ok(())
    }
}

/// `initial_lr · lr_decay^floor(epoch / decay_period_epochs)` for a 0-based
/// epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.decay_period_epochs.max(1)) as i32;
    cfg.initial_lr * cfg.lr_decay.powi(steps)
}

/// One velocity tensor per parameter, zero-initialised.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub names: Vec<String>,
    pub velocity: Vec<Tensor4<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&Param<T>]) -> Self {
        Self {
            names: params.iter().map(|p| p.name.clone()).collect(),
            velocity: params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect(),
        }
    }

    fn check(&self, params: &[&mut Param<T>]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::contract(format!(
                "sgd_step: {} parameters but {} velocity slots",
                params.len(),
                self.velocity.len()
            )));
        }
        for ((p, v), name) in params.iter().zip(&self.velocity).zip(&self.names) {
            if p.value.shape() != v.shape() || p.grad.shape() != v.shape() || &p.name != name {
                return Err(Error::contract(format!("sgd_step: slot mismatch for {}", p.name)));
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(params: &[&mut Param<T>]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// `v ← μ·v + g; p ← p − lr·v`. Nothing is modified if any gradient is
/// non-finite.
pub fn sgd_step<T: Scalar>(
    mut params: Vec<&mut Param<T>>,
    opt: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    clip_grad_norm: Option<f64>,
) -> Result<()> {
    opt.check(&params)?;
    if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Divergence(format!("gradient of {}", p.name)));
    }
    let scale = match clip_grad_norm {
        Some(max) => {
            let norm = grad_norm(&params);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (p, v) in params.iter_mut().zip(&mut opt.velocity) {
        let Param { value, grad, .. } = &mut **p;
        for ((w, g), vel) in value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            let next = momentum * vel.as_f64() + scale * g.as_f64();
            *vel = T::from_f64(next);
            *w = T::from_f64(w.as_f64() - lr * next);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// The log as CSV: `epoch,lr,train_loss,val_loss,train_acc,val_acc`.
pub fn log_csv(records: &[EpochRecord]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in records {
        writer.serialize(r)?;
    }
    if records.is_empty() {
        writer.write_record(["epoch", "lr", "train_loss", "val_loss", "train_acc", "val_acc"])?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Format(format!("csv: {}", e.error())))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}
