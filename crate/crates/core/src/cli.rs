//! `focusnet` subcommands. Exit codes: 0 success, 2 configuration or
//! checkpoint problems, 3 data problems, 4 numerical failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::OpKind;
use crate::config::{RunConfig, SCHEMA};
use crate::data::pnm::{read_pnm, write_pnm, Image8};
use crate::data::transform::resample;
use crate::data::{
    compute_stats, expand_dataset, image_to_tensor, load_dataset, normalize, quantize, resize, split,
    synth_generate, write_dataset, DatasetManifest, SegmentationSample,
};
use crate::error::{Error, ErrorKind, Result};
use crate::gradsuite::{run_suite, SuiteOptions};
use crate::metrics::{binarize, evaluate};
use crate::model::{param_count, FocusNetParams};
use crate::rng::RngState;
use crate::train::{load_checkpoint, train, validation_loss, CheckpointRecord};

#[derive(Debug, Parser)]
#[command(name = "focusnet", version, about = "Two-branch gated-attention segmentation network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its best checkpoint, history and validation metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write probability and mask images for one input image.
    Predict(PredictArgs),
    /// Finite-difference checks of every primitive, block and the full network.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic ellipse dataset.
    Synth(SynthArgs),
    /// Print the configuration schema and the per-layer parameter ledger.
    Schema(SchemaArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root with images/ and masks/.
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Use N generated samples instead of a dataset directory.
    #[arg(long, value_name = "N")]
    pub synth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Which part of the dataset to score.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitChoice,
    /// Directory for metrics.csv and metrics.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    All,
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PGM or PPM input.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Use the small end-to-end network (the only size offered).
    #[arg(long, default_value_t = true)]
    pub tiny: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt one backward rule to confirm the checks catch it.
    #[arg(long, hide = true, value_name = "OP")]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.kind().exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(&a, out).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| 0),
        Command::Predict(a) => cmd_predict(&a, out).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Synth(a) => cmd_synth(&a, out).map(|_| 0),
        Command::Schema(a) => cmd_schema(&a, out).map(|_| 0),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads (or generates) the dataset and brings every sample to the network input size.
fn load_data(cfg: &RunConfig, data: &DataArgs) -> Result<DatasetManifest> {
    let manifest = match (&data.synth, data.data.as_ref().or(cfg.data_dir.as_ref())) {
        (Some(n), _) => synth_generate(
            *n,
            cfg.arch.input_size,
            cfg.arch.in_channels,
            &mut RngState::derive(cfg.seed, &[0xda7a]),
        )?,
        (None, Some(dir)) => load_dataset(dir)?,
        (None, None) => return Err(Error::Config("pass --data DIR or --synth N".to_string())),
    };
    if manifest.channels != cfg.arch.in_channels {
        return Err(Error::Config(format!(
            "dataset has {} channels but in_channels = {}",
            manifest.channels, cfg.arch.in_channels
        )));
    }
    let size = cfg.arch.input_size;
    let samples = manifest
        .samples
        .iter()
        .map(|s| if s.height() == size && s.width() == size { Ok(s.clone()) } else { resize(s, size) })
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(samples, manifest.source)
}

fn normalize_all(samples: &[SegmentationSample], stats: &crate::data::NormalizationStats) -> Result<Vec<SegmentationSample>> {
    samples.iter().map(|s| normalize(s, stats)).collect()
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = run_config(&args.config)?;
    if let Some(d) = &args.data.data {
        cfg.data_dir = Some(d.clone());
    }
    create_dir(&args.out)?;
    write_file(&args.out.join("config.txt"), cfg.to_text())?;

    let manifest = load_data(&cfg, &args.data)?;
    let (train_set, val_set) = split(&manifest, cfg.train_fraction, cfg.seed)?;
    let stats = compute_stats(&train_set.samples)?;
    for (c, clamped) in stats.clamped.iter().enumerate() {
        if *clamped {
            say(out, format!("warning: channel {c} is constant; its std was clamped"))?;
        }
    }
    stats.save(&args.out.join("stats.txt"))?;
    let mut train_samples = normalize_all(&train_set.samples, &stats)?;
    let val_samples = normalize_all(&val_set.samples, &stats)?;
    if let Some(target) = cfg.augment.target_size {
        let normalized = DatasetManifest::new(train_samples, train_set.source.clone())?;
        let mut rng = RngState::derive(cfg.seed, &[0xa06]);
        train_samples = expand_dataset(&normalized, &cfg.augment, target.max(normalized.len()), &mut rng)?.samples;
    }
    say(
        out,
        format!(
            "training on {} samples, validating on {}; {} parameters",
            train_samples.len(),
            val_samples.len(),
            param_count(&cfg.arch)?.total
        ),
    )?;

    let mut train_cfg = cfg.train_config();
    let ckpt = args.out.join("best.fnet");
    train_cfg.checkpoint_path = Some(ckpt.clone());
    let mut lines = Vec::new();
    let outcome = train(&train_cfg, &cfg.arch, &train_samples, &val_samples, Some(stats), |e| {
        lines.push(format!(
            "epoch {:>3}  train {:.6}  val {:.6}  lr {}",
            e.epoch, e.train_loss, e.val_loss, e.lr
        ));
    });
    for l in &lines {
        say(out, l)?;
    }
    let outcome = outcome?;
    write_file(&args.out.join("history.csv"), outcome.history.to_csv())?;

    let best = outcome.best.to_model()?;
    let report = evaluate(&best, &val_samples, cfg.threshold, cfg.train.batch_size)?;
    write_file(&args.out.join("metrics.csv"), report.to_csv())?;
    let table = report.table("FocusNet");
    write_file(&args.out.join("metrics.txt"), &table)?;
    say(
        out,
        format!(
            "best epoch {} val_loss {} val_dice {}",
            outcome.best.epoch,
            outcome.best.best_val_loss,
            1.0 - outcome.best.best_val_loss
        ),
    )?;
    say(out, table.trim_end())
}

/// Checkpoint problems of any kind, including an unreadable file, exit as configuration errors.
fn load_model(path: &Path) -> Result<(CheckpointRecord, FocusNetParams<f32>)> {
    let rec = load_checkpoint(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Checkpoint(format!("{}: {source}", path.display())),
        other => other,
    })?;
    let model = rec.to_model()?;
    Ok((rec, model))
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (rec, model) = load_model(&args.checkpoint)?;
    let mut cfg = run_config(&args.config)?;
    if cfg.arch != RunConfig::default().arch && cfg.arch != rec.arch {
        return Err(Error::Checkpoint(format!(
            "architecture differs from the configured one; the checkpoint holds {}",
            rec.arch.to_text().lines().collect::<Vec<_>>().join(", ")
        )));
    }
    cfg.arch = rec.arch.clone();
    if let Some(t) = args.threshold {
        cfg.threshold = t;
        cfg.validate()?;
    }
    let manifest = load_data(&cfg, &args.data)?;
    let samples = match args.split {
        SplitChoice::All => manifest.samples,
        choice => {
            let (tr, va) = split(&manifest, cfg.train_fraction, cfg.seed)?;
            if choice == SplitChoice::Train { tr.samples } else { va.samples }
        }
    };
    let samples = match &rec.normalization {
        Some(stats) => normalize_all(&samples, stats)?,
        None => samples,
    };
    let loss = validation_loss(&model, &samples, cfg.train.batch_size, cfg.train.smooth)?;
    let report = evaluate(&model, &samples, cfg.threshold, cfg.train.batch_size)?;
    say(
        out,
        format!(
            "{} samples  dice_loss {loss}  soft_dice {}  threshold {}",
            samples.len(),
            1.0 - loss,
            cfg.threshold
        ),
    )?;
    let table = report.table("FocusNet");
    say(out, table.trim_end())?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_file(&dir.join("metrics.csv"), report.to_csv())?;
        write_file(&dir.join("metrics.txt"), &table)?;
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(Error::Config(format!("threshold {} outside (0, 1)", args.threshold)));
    }
    let (rec, model) = load_model(&args.checkpoint)?;
    let img = read_pnm(&args.image)?;
    if img.channels != rec.arch.in_channels {
        return Err(Error::Config(format!(
            "image has {} channels but the model expects {}",
            img.channels, rec.arch.in_channels
        )));
    }
    let (h, w, size) = (img.height, img.width, rec.arch.input_size);
    let mut x = image_to_tensor(&img);
    if (h, w) != (size, size) {
        let (ry, rx) = (h as f64 / size as f64, w as f64 / size as f64);
        x = resample(&x, size, size, false, |y, xx| ((y as f64 + 0.5) * ry - 0.5, (xx as f64 + 0.5) * rx - 0.5));
    }
    if let Some(stats) = &rec.normalization {
        let mask = crate::Tensor::zeros(&[1, size, size]);
        x = normalize(&SegmentationSample::new("input", x, mask)?, stats)?.image;
    }
    let c = x.shape()[0];
    let prob = model.predict(&x.reshape(&[1, c, size, size])?)?.reshape(&[1, size, size])?;
    let prob = if (h, w) != (size, size) {
        let (ry, rx) = (size as f64 / h as f64, size as f64 / w as f64);
        resample(&prob, h, w, false, |y, xx| ((y as f64 + 0.5) * ry - 0.5, (xx as f64 + 0.5) * rx - 0.5))
    } else {
        prob
    };
    let mask = binarize(&prob, args.threshold)?;

    create_dir(&args.out)?;
    let stem = args.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let prob_img = Image8::new(w, h, 1, prob.data().iter().map(|&p| quantize(p)).collect())?;
    let mask_img = Image8::new(w, h, 1, mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect())?;
    let prob_path = args.out.join(format!("{stem}_prob.pgm"));
    let mask_path = args.out.join(format!("{stem}_mask.pgm"));
    write_pnm(&prob_path, &prob_img)?;
    write_pnm(&mask_path, &mask_img)?;
    say(out, format!("wrote {} and {}", prob_path.display(), mask_path.display()))
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let fault = match &args.corrupt {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown op '{name}'; known ops: {}", known.join(", ")))
        })?),
        None => None,
    };
    let opts = SuiteOptions {
        seed: args.seed,
        fault,
        skip_model: false,
    };
    let mut lines = Vec::new();
    let results = run_suite(&opts, |o| {
        lines.push(format!(
            "{}  {:<36} max_rel_error {:.3e}  tolerance {:.0e}  coordinates {}",
            if o.passed() { "PASS" } else { "FAIL" },
            o.name,
            o.max_rel_error,
            o.tolerance,
            o.coordinates
        ));
    })?;
    for l in &lines {
        say(out, l)?;
    }
    let failed = results.iter().filter(|o| !o.passed()).count();
    say(out, format!("{} checks, {failed} failed", results.len()))?;
    Ok(if failed == 0 { 0 } else { ErrorKind::Numerical.exit_code() })
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let m = synth_generate(args.n, args.size, args.channels, &mut RngState::new(args.seed))?;
    write_dataset(&m, &args.out)?;
    say(out, format!("wrote {} samples to {}", m.len(), args.out.display()))
}

fn cmd_schema(args: &SchemaArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(&args.config)?;
    for (k, desc) in SCHEMA {
        say(out, format!("{k:<24} {desc}"))?;
    }
    say(out, "")?;
    say(out, cfg.to_text().trim_end())?;
    say(out, "")?;
    say(out, param_count(&cfg.arch)?.to_string())
}
