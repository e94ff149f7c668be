use std::fmt::Write as _;
use std::fs;

use super::run::{train_run, Progress, TrainOptions};
use super::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{report_csv, report_table, ExperimentResult};
use crate::model::{experiment_configs_from, ExpressionNet};

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub name: String,
    pub config: RunConfig,
    pub progress: Progress,
    pub best_model: ExpressionNet,
}

#[derive(Debug, Default)]
pub struct ExperimentsOutcome {
    pub runs: Vec<ExperimentRun>,
    /// Rows from each run's best validation epoch (the headline numbers).
    pub best: Vec<ExperimentResult>,
    /// Rows from each run's final epoch.
    pub last: Vec<ExperimentResult>,
    /// `(experiment, error)` for runs that failed.
    pub failures: Vec<(String, String)>,
}

impl ExperimentsOutcome {
    /// Both tables plus any failures, as written to `report.txt`.
    pub fn report_text(&self) -> String {
        let mut out = String::from("Best validation epoch\n");
        out.push_str(&report_table(&self.best));
        out.push_str("\nFinal epoch\n");
        out.push_str(&report_table(&self.last));
        if !self.failures.is_empty() {
            out.push_str("\nFailed experiments\n");
            for (name, err) in &self.failures {
                let _ = writeln!(out, "{name}: {err}");
            }
        }
        out
    }
}

/// Trains every experiment configuration (model toggles from the table,
/// everything else from `base`) on the same split. A failing experiment is
/// recorded and the rest continue. With `opts.out_dir`, each run gets
/// `exp{k}/` and the reports go to `report.txt`, `report.csv` (best epoch)
/// and `report_final.csv`.
pub fn run_experiments(
    base: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    opts: &TrainOptions,
) -> Result<ExperimentsOutcome> {
    base.validate()?;
    let mut outcome = ExperimentsOutcome::default();
    for (k, experiment) in experiment_configs_from(&base.model).into_iter().enumerate() {
        let config = RunConfig {
            model: experiment.config,
            ..base.clone()
        };
        let run_opts = TrainOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("exp{}", k + 1))),
            verbose: opts.verbose,
        };
        if opts.verbose {
            eprintln!("== {}", experiment.name);
        }
        let result = train_run(&config, train, val, &run_opts).and_then(|run| {
            let best = ExperimentResult::from_confusion(&experiment.name, &run.progress.best_confusion)?;
            let last = ExperimentResult::from_confusion(&experiment.name, &run.progress.last_confusion)?;
            Ok((run, best, last))
        });
        match result {
            Ok((run, best, last)) => {
                outcome.best.push(best);
                outcome.last.push(last);
                outcome.runs.push(ExperimentRun {
                    name: experiment.name,
                    config,
                    progress: run.progress,
                    best_model: run.best_model,
                });
            }
            Err(e) => outcome.failures.push((experiment.name, e.to_string())),
        }
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, contents) in [
            ("report.txt", outcome.report_text()),
            ("report.csv", report_csv(&outcome.best)?),
            ("report_final.csv", report_csv(&outcome.last)?),
        ] {
            let path = dir.join(file);
            fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(outcome)
}
