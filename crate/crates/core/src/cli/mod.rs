//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format/I-O error,
//! 3 training divergence, 4 gradient-check failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::augment::{apply_pipeline_logged, round_half_up};
use crate::data::{
    decode_ppm, encode_pgm, encode_ppm, images_to_tensor, load_dataset, stratified_split, synth_toy, write_corpus,
    Dataset,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, GradCheckOptions};
use crate::metrics::{report_csv, ExperimentResult};
use crate::model::{argmax, experiment_configs_from, Heatmap, CLASS_NAMES};
use crate::nn::{Layer, Mode};
use crate::train::{evaluate, load_checkpoint, resume_run, run_experiments, train_run, RunConfig, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "kexp", version, about = "Two-class facial-expression CNN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model; writes config.json, log.csv, best.ckpt, final.ckpt.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval(EvalArgs),
    /// Train all eight experiment configurations and write the report.
    Experiments(RunArgs),
    /// Write augmented copies of a corpus with a manifest.
    Augment(AugmentArgs),
    /// Generate the procedural toy corpus.
    SynthToy(SynthArgs),
    /// Finite-difference gradient check of every layer and a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write a Grad-CAM heatmap (P5 PGM) per input image.
    Gradcam(GradcamArgs),
}

/// Options shared by `train` and `experiments`; flags override the config
/// file, which overrides the defaults.
#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration (sections model, train, augment, data).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus root with happy/ and sad/.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sets every seed (model, shuffling, split, augmentation).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Model input side length; images are resized to it.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    val_frac: Option<f64>,
    /// Train without augmentation.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use the toggles of experiment 1..=8.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
    experiment: Option<u8>,
    /// Continue from a checkpoint (its stored config is used; --epochs may
    /// extend it).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate on the whole corpus instead of the validation split.
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration; only its augment section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Augmented copies per source image.
    #[arg(long, default_value_t = 1)]
    copies: usize,
    #[arg(long, default_value_t = 224)]
    size: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Images per class.
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 224)]
    size: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Class to explain (happy or sad); defaults to the predicted class.
    #[arg(long)]
    class: Option<String>,
    /// PPM images or directories of them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

/// Runs the command line and returns the process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Experiments(args) => cmd_experiments(args),
        Command::Augment(args) => cmd_augment(args),
        Command::SynthToy(args) => cmd_synth(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Gradcam(args) => cmd_gradcam(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

/// Reads a run configuration; unknown keys are rejected by name.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.data.seed = seed;
        cfg.augment.master_seed = seed;
    }
    if let Some(root) = &args.data {
        cfg.data.root = Some(root.clone());
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.initial_lr = v;
    }
    if let Some(v) = args.workers {
        cfg.train.workers = v;
    }
    if let Some(v) = args.size {
        cfg.model.input_size = v;
    }
    if let Some(v) = args.val_frac {
        cfg.data.val_frac = v;
    }
    if args.no_augment {
        cfg.train.augment = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let root = cfg
        .data
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("no corpus given (use --data or data.root)".into()))?;
    let ds = load_dataset(root, cfg.model.input_size)?;
    stratified_split(&ds, cfg.data.val_frac, cfg.data.seed)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let opts = TrainOptions {
        out_dir: Some(args.run.out.clone()),
        verbose: !args.run.quiet,
    };
    let outcome = match &args.resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            if let Some(epochs) = args.run.epochs {
                ckpt.config.train.epochs = epochs;
            }
            let best_path = path.with_file_name("best.ckpt");
            let best = best_path.is_file().then(|| load_checkpoint(&best_path)).transpose()?;
            let (train, val) = load_split(&ckpt.config)?;
            resume_run(ckpt, best.map(|b| b.model), &train, &val, &opts)?
        }
        None => {
            let mut cfg = resolve_config(&args.run)?;
            if let Some(k) = args.experiment {
                cfg.model = experiment_configs_from(&cfg.model).swap_remove(k as usize - 1).config;
            }
            let (train, val) = load_split(&cfg)?;
            train_run(&cfg, &train, &val, &opts)?
        }
    };
    let p = &outcome.progress;
    let mut rows = Vec::new();
    for (label, cm) in [("best", &p.best_confusion), ("final", &p.last_confusion)] {
        rows.push(ExperimentResult::from_confusion(label, cm)?);
    }
    let dir = &args.run.out;
    write_text(&dir.join("report.txt"), &crate::metrics::report_table(&rows))?;
    write_text(&dir.join("report.csv"), &report_csv(&rows)?)?;
    println!(
        "best epoch {} val acc {:.4}; final val acc {:.4}",
        p.best_epoch,
        p.best_val_acc,
        p.log.last().map_or(0.0, |r| r.val_acc)
    );
    Ok(EXIT_OK)
}

fn cmd_experiments(args: RunArgs) -> Result<i32> {
    let cfg = resolve_config(&args)?;
    let (train, val) = load_split(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_text(&args.out.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        verbose: !args.quiet,
    };
    let outcome = run_experiments(&cfg, &train, &val, &opts)?;
    print!("{}", outcome.report_text());
    Ok(if outcome.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_DATA
    })
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if let Some(root) = &args.data {
        cfg.data.root = Some(root.clone());
    }
    let ds = if args.all {
        let root = cfg
            .data
            .root
            .as_ref()
            .ok_or_else(|| Error::Config("no corpus given".into()))?;
        load_dataset(root, cfg.model.input_size)?
    } else {
        load_split(&cfg)?.1
    };
    let mut model = ckpt.model;
    let eval = evaluate(&mut model, &ds, cfg.train.batch_size)?;
    let cm = eval.confusion;
    let class = |k: usize| -> Result<serde_json::Value> {
        let s = cm.summarize(k)?;
        Ok(json!({"precision": s.precision, "recall": s.recall, "f1": s.f1, "warnings": s.warnings}))
    };
    let report = json!({
        "checkpoint": args.checkpoint,
        "epoch": ckpt.epoch,
        "samples": cm.total(),
        "loss": eval.loss,
        "accuracy": cm.accuracy(),
        "confusion": cm.counts,
        CLASS_NAMES[0]: class(0)?,
        CLASS_NAMES[1]: class(1)?,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(EXIT_OK)
}

fn cmd_augment(args: AugmentArgs) -> Result<i32> {
    let mut cfg = match &args.config {
        Some(path) => read_config(path)?.augment,
        None => Default::default(),
    };
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    let ds = load_dataset(&args.input, args.size)?;
    for class in CLASS_NAMES {
        let dir = args.out.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let manifest = args.out.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)?;
    writer.write_record(["path", "label", "source", "index", "operations"])?;
    for (k, item) in ds.items().iter().enumerate() {
        let stem = Path::new(&item.source_path)
            .file_stem()
            .map_or_else(|| k.to_string(), |s| s.to_string_lossy().into_owned());
        for c in 0..args.copies {
            let index = (k * args.copies + c) as u64;
            let (img, ops) = apply_pipeline_logged(&item.image, &cfg, index);
            let rel = format!("{}/{stem}_aug{c}.ppm", CLASS_NAMES[item.label]);
            let path = args.out.join(&rel);
            fs::write(&path, encode_ppm(&img)).map_err(|e| Error::io(&path, e))?;
            writer.write_record([
                rel,
                CLASS_NAMES[item.label].to_string(),
                item.source_path.clone(),
                index.to_string(),
                ops.join(";"),
            ])?;
        }
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    println!("wrote {} images to {}", ds.len() * args.copies, args.out.display());
    Ok(EXIT_OK)
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let ds = synth_toy(args.n, args.size, args.seed)?;
    write_corpus(&ds, &args.out)?;
    println!("wrote {} images to {}", ds.len(), args.out.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let entries = run_suite(args.trials, args.seed, &GradCheckOptions::default())?;
    let mut all = true;
    println!(
        "{:<16} {:>6} {:>12} {:>10}  status",
        "check", "trials", "max rel err", "tolerance"
    );
    for e in &entries {
        let ok = e.passed();
        all &= ok;
        println!(
            "{:<16} {:>6} {:>12.3e} {:>10.0e}  {}",
            e.name,
            e.trials,
            e.report.max_rel_error,
            e.tolerance,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            println!("    worst coordinate: {}", e.report.worst);
        }
    }
    Ok(if all { EXIT_OK } else { EXIT_GRADCHECK })
}

fn cmd_gradcam(args: GradcamArgs) -> Result<i32> {
    let mut model = load_checkpoint(&args.checkpoint)?.model;
    let size = model.config().input_size;
    let target = match args.class.as_deref() {
        None => None,
        Some(name) => Some(
            CLASS_NAMES
                .iter()
                .position(|c| c.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Config(format!("unknown class {name:?} (happy or sad)")))?,
        ),
    };
    let mut files = Vec::new();
    for input in &args.inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut stdout = std::io::stdout().lock();
    for file in files {
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let img = crate::data::resize_image(&decode_ppm(&bytes)?, size, size);
        let x = images_to_tensor(&[&img])?;
        let logits = model.forward(&x, Mode::Eval)?;
        let predicted = argmax(logits.sample(0));
        let class = target.unwrap_or(predicted);
        let map = model.grad_cam(&x, class)?;
        let stem = file
            .file_stem()
            .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let out = args.out.join(format!("{stem}.pgm"));
        emit_pgm(&map, &out)?;
        let _ = writeln!(
            stdout,
            "{}: predicted {}, heatmap for {} -> {}",
            file.display(),
            CLASS_NAMES[predicted],
            CLASS_NAMES[class],
            out.display()
        );
    }
    Ok(EXIT_OK)
}

/// Heatmap bytes as P5: each value `v ∈ [0, 1]` becomes
/// `round_half_up(255·v)`.
pub fn heatmap_pgm(map: &Heatmap) -> Result<Vec<u8>> {
    if let Some(v) = map.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract(format!("heatmap value {v} outside [0, 1]")));
    }
    let pixels: Vec<u8> = map.values.iter().map(|&v| round_half_up(255.0 * v)).collect();
    encode_pgm(map.size, map.size, &pixels)
}

pub fn emit_pgm(map: &Heatmap, path: &Path) -> Result<()> {
    let bytes = heatmap_pgm(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(value: f64) -> Heatmap {
        Heatmap {
            size: 224,
            values: vec![value; 224 * 224],
        }
    }

    fn payload(bytes: &[u8]) -> &[u8] {
        &bytes[b"P5\n224 224\n255\n".len()..]
    }

    #[test]
    fn pgm_bounds_and_rounding() {
        assert!(payload(&heatmap_pgm(&map(0.0)).unwrap()).iter().all(|&b| b == 0));
        assert!(payload(&heatmap_pgm(&map(1.0)).unwrap()).iter().all(|&b| b == 255));
        assert!(payload(&heatmap_pgm(&map(0.5)).unwrap()).iter().all(|&b| b == 128));
        assert!(heatmap_pgm(&map(1.5)).is_err());
    }

    #[test]
    fn unwritable_pgm_path_is_a_data_error() {
        let err = emit_pgm(&map(0.0), Path::new("/nonexistent-dir/x.pgm")).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_DATA);
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_cli(["kexp"]), EXIT_USAGE);
        assert_eq!(run_cli(["kexp", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_cli(["kexp", "synth-toy", "--bogus"]), EXIT_USAGE);
        assert_eq!(run_cli(["kexp", "--help"]), EXIT_OK);
    }

    #[test]
    fn config_precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"train": {"epochs": 7, "batch_size": 4}, "model": {"input_size": 32}}"#,
        )
        .unwrap();
        let args = RunArgs {
            config: Some(path.clone()),
            data: None,
            out: dir.path().into(),
            seed: Some(9),
            epochs: Some(3),
            batch_size: None,
            lr: None,
            workers: None,
            size: None,
            val_frac: None,
            no_augment: false,
            quiet: true,
        };
        let cfg = resolve_config(&args).unwrap();
        assert_eq!(
            (cfg.train.epochs, cfg.train.batch_size, cfg.model.input_size),
            (3, 4, 32)
        );
        assert_eq!((cfg.train.momentum, cfg.augment.master_seed), (0.9, 9));

        fs::write(&path, r#"{"model": {"colour": true}}"#).unwrap();
        match read_config(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("colour"), "{msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }
}
