use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::{log_csv, lr_at, sgd_step, EpochRecord, OptimizerState, RunConfig};
use crate::data::{batch_iter, BatchOptions, Dataset};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{argmax, ExpressionNet};
use crate::nn::{softmax_cross_entropy, Layer, Mode};

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `config.json`, `log.csv`, `best.ckpt` and `final.ckpt`,
    /// rewritten after every epoch.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

/// Everything about a run's history that a resumed run must carry on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub log: Vec<EpochRecord>,
    /// 0 until the first epoch completes.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    pub best_confusion: ConfusionMatrix,
    pub last_confusion: ConfusionMatrix,
}

impl Progress {
    /// Higher validation accuracy wins; ties go to the lower loss.
    fn improves(&self, acc: f64, loss: f64) -> bool {
        self.best_epoch == 0 || acc > self.best_val_acc || (acc == self.best_val_acc && loss < self.best_val_loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub model: ExpressionNet,
    pub optimizer: OptimizerState,
    /// Model as of the best validation epoch.
    pub best_model: ExpressionNet,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean cross-entropy over all samples.
    pub loss: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }
}

/// Eval-mode pass over `ds` in dataset order.
pub fn evaluate(model: &mut ExpressionNet, ds: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut confusion = ConfusionMatrix::new();
    let mut loss_sum = 0.0;
    for batch in batch_iter(ds, BatchOptions::ordered(batch_size))? {
        let batch = batch?;
        let logits = model.forward(&batch.images, Mode::Eval)?;
        let (loss, _) = softmax_cross_entropy(&logits, &batch.labels)?;
        loss_sum += loss * batch.labels.len() as f64;
        for (i, &label) in batch.labels.iter().enumerate() {
            confusion.update(label, argmax(logits.sample(i)))?;
        }
    }
    Ok(EvalResult {
        loss: loss_sum / ds.len() as f64,
        confusion,
    })
}

/// Trains a fresh model for `cfg.train.epochs` epochs.
pub fn train_run(cfg: &RunConfig, train: &Dataset, val: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = ExpressionNet::new(cfg.model.clone())?;
    let optimizer = OptimizerState::new(&model.params());
    let start = Checkpoint {
        config: cfg.clone(),
        epoch: 0,
        model: model.clone(),
        optimizer,
        progress: Progress::default(),
    };
    run_epochs(start, model, train, val, opts)
}

/// Continues a checkpointed run up to `ckpt.config.train.epochs`. With the
/// same data, the trajectory is identical to an uninterrupted run. `best` is
/// the model of the run's best epoch so far (e.g. from `best.ckpt`); without
/// it the checkpointed model stands in.
pub fn resume_run(
    ckpt: Checkpoint,
    best: Option<ExpressionNet>,
    train: &Dataset,
    val: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    ckpt.config.validate()?;
    let best = best.unwrap_or_else(|| ckpt.model.clone());
    run_epochs(ckpt, best, train, val, opts)
}

fn check_data(cfg: &RunConfig, train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let size = cfg.model.input_size;
    for ds in [train, val] {
        if let Some(item) = ds
            .items()
            .iter()
            .find(|it| it.image.width() != size || it.image.height() != size)
        {
            return Err(Error::Config(format!(
                "{} is {}x{}, the model expects {size}x{size}",
                item.source_path,
                item.image.width(),
                item.image.height()
            )));
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_epochs(
    start: Checkpoint,
    mut best_model: ExpressionNet,
    train: &Dataset,
    val: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let Checkpoint {
        config: cfg,
        epoch: first_epoch,
        mut model,
        mut optimizer,
        mut progress,
    } = start;
    check_data(&cfg, train, val)?;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.json"), serde_json::to_string_pretty(&cfg)?.as_bytes())?;
    }
    let tc = &cfg.train;

    for epoch in first_epoch..tc.epochs {
        let lr = lr_at(epoch, tc);
        let batches = batch_iter(
            train,
            BatchOptions {
                augment: tc.augment.then(|| cfg.augment.clone()),
                workers: tc.workers,
                ..BatchOptions::new(tc.batch_size, epoch as u64, tc.seed)
            },
        )?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in batches {
            let batch = batch?;
            model.zero_grads();
            let logits = model.forward(&batch.images, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("training loss at epoch {}", epoch + 1)));
            }
            model.backward(&grad)?;
            sgd_step(model.params_mut(), &mut optimizer, lr, tc.momentum, tc.clip_grad_norm)?;
            loss_sum += loss * batch.labels.len() as f64;
            correct += (0..batch.labels.len())
                .filter(|&i| argmax(logits.sample(i)) == batch.labels[i])
                .count();
        }

        let eval = evaluate(&mut model, val, tc.batch_size)?;
        if !eval.loss.is_finite() {
            return Err(Error::Divergence(format!("validation loss at epoch {}", epoch + 1)));
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: eval.loss,
            train_acc: correct as f64 / train.len() as f64,
            val_acc: eval.accuracy(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.5}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
                record.epoch, record.lr, record.train_loss, record.train_acc, record.val_loss, record.val_acc
            );
        }
        let improved = progress.improves(record.val_acc, record.val_loss);
        if improved {
            progress.best_epoch = record.epoch;
            progress.best_val_acc = record.val_acc;
            progress.best_val_loss = record.val_loss;
            progress.best_confusion = eval.confusion;
            best_model = model.clone();
        }
        progress.last_confusion = eval.confusion;
        progress.log.push(record);

        if let Some(dir) = &opts.out_dir {
            let ckpt = Checkpoint {
                config: cfg.clone(),
                epoch: epoch + 1,
                model,
                optimizer,
                progress,
            };
            if improved {
                save_checkpoint(&ckpt, &dir.join("best.ckpt"))?;
            }
            save_checkpoint(&ckpt, &dir.join("final.ckpt"))?;
            write_file(&dir.join("log.csv"), log_csv(&ckpt.progress.log)?.as_bytes())?;
            (model, optimizer, progress) = (ckpt.model, ckpt.optimizer, ckpt.progress);
        }
    }

    Ok(TrainOutcome {
        config: cfg,
        model,
        optimizer,
        best_model,
        progress,
    })
}

#[cfg(test)]
mod tests {
    use super::super::load_checkpoint;
    use super::*;
    use crate::data::{stratified_split, synth_toy};
    use crate::model::ModelConfig;

    fn small_config(epochs: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            input_size: 16,
            dense_widths: [8, 4],
            use_batchnorm: true,
            use_dropout: true,
            ..Default::default()
        };
        cfg.train.epochs = epochs;
        cfg.train.batch_size = 8;
        cfg.train.workers = 2;
        cfg
    }

    fn split() -> (Dataset, Dataset) {
        stratified_split(&synth_toy(10, 16, 3).unwrap(), 0.2, 1).unwrap()
    }

    #[test]
    fn one_record_per_epoch_and_deterministic() {
        let (train, val) = split();
        let cfg = small_config(3);
        let a = train_run(&cfg, &train, &val, &TrainOptions::default()).unwrap();
        let b = train_run(&cfg, &train, &val, &TrainOptions::default()).unwrap();
        assert_eq!(a.progress.log.len(), 3);
        assert_eq!(a.progress.log, b.progress.log);
        assert_eq!(a.progress.log.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(a.progress.best_epoch >= 1);
    }

    #[test]
    fn writes_the_run_directory() {
        let (train, val) = split();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            verbose: false,
        };
        let outcome = train_run(&small_config(2), &train, &val, &opts).unwrap();
        for file in ["config.json", "log.csv", "best.ckpt", "final.ckpt"] {
            assert!(dir.path().join(file).is_file(), "{file}");
        }
        let log = fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
        let ckpt = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(ckpt.epoch, 2);
        assert_eq!(ckpt.progress, outcome.progress);
        let echoed: RunConfig =
            serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(echoed, small_config(2));
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let (train, val) = split();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            verbose: false,
        };
        let full = train_run(&small_config(4), &train, &val, &TrainOptions::default()).unwrap();
        train_run(&small_config(2), &train, &val, &opts).unwrap();
        let mut ckpt = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        ckpt.config.train.epochs = 4;
        let resumed = resume_run(ckpt, None, &train, &val, &TrainOptions::default()).unwrap();
        assert_eq!(resumed.progress.log, full.progress.log);
    }

    #[test]
    fn size_mismatch_is_a_config_error() {
        let (train, val) = split();
        let mut cfg = small_config(1);
        cfg.model.input_size = 20;
        assert!(matches!(
            train_run(&cfg, &train, &val, &TrainOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (train, val) = split();
        let mut cfg = small_config(3);
        cfg.model.use_batchnorm = false;
        cfg.train.initial_lr = 1e30;
        assert!(matches!(
            train_run(&cfg, &train, &val, &TrainOptions::default()),
            Err(Error::Divergence(_))
        ));
    }
}
