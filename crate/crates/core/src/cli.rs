//! Command-line front end: `gen-data`, `train`, `eval`, `score`, `localize`.
//!
//! Results go to stdout as one JSON object per line; epoch losses and error
//! messages go to stderr. Exit status is 0 on success, 1 on runtime or
//! integrity failures and 2 on usage errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::data::{generate_synthetic, load_dataset, netpbm, tokenize, write_dataset, Category, Counts, Dataset};
use crate::error::{CladError, Result};
use crate::evaluation::{ablate, calibrate_threshold, evaluate};
use crate::model::Config;
use crate::numerics::Tensor;
use crate::scoring::{heatmap_pgm, localize, score_image};
use crate::training::{default_pretrain, fit_with_progress, load_checkpoint, save_checkpoint, Stage, TrainState};

#[derive(Parser)]
#[command(name = "clad", about = "Contrastive vision-language anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic texture dataset directory.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        category: Category,
        #[arg(long)]
        out: PathBuf,
        /// Train, test-normal and test-anomalous counts.
        #[arg(long, default_value = "64,16,16")]
        counts: Counts,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Pretrain and fine-tune, then write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON config; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pretraining dataset directories (default: the other synthetic categories).
        #[arg(long, num_args = 1..)]
        pretrain: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs_pretrain: Option<usize>,
        #[arg(long)]
        epochs_finetune: Option<usize>,
    },
    /// Evaluate a checkpoint, or run the ablation study.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON report path; the CSV summary goes next to it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, requires = "seeds")]
        ablate: bool,
        #[arg(long, value_delimiter = ',', requires = "ablate")]
        seeds: Vec<u64>,
    },
    /// Score one image against a description.
    Score(ScoreArgs),
    /// Score one image and write its Grad-CAM heatmap.
    Localize {
        #[command(flatten)]
        score: ScoreArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    text: String,
    /// Overrides the threshold stored in the checkpoint.
    #[arg(long)]
    threshold: Option<f64>,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData {
            seed,
            category,
            out: dir,
            counts,
            size,
        } => {
            let ds = generate_synthetic(seed, category, counts, size)?;
            write_dataset(&ds, &dir)?;
            emit(
                out,
                json!({
                    "out": dir,
                    "category": ds.category,
                    "train": ds.train_normal.len(),
                    "test_normal": ds.test_normal.len(),
                    "test_anomalous": ds.test_anomalous.len(),
                }),
            )
        }
        Command::Train {
            data,
            config,
            out: ckpt,
            pretrain,
            seed,
            epochs_pretrain,
            epochs_finetune,
        } => {
            let mut config = match config {
                Some(path) => Config::from_json(&read_text(&path)?)?,
                None => Config::default(),
            };
            config.seed = seed.unwrap_or(config.seed);
            config.epochs_pretrain = epochs_pretrain.unwrap_or(config.epochs_pretrain);
            config.epochs_finetune = epochs_finetune.unwrap_or(config.epochs_finetune);
            config.validate()?;
            let target = load_dataset(&data)?;
            let pre: Vec<Dataset> = if pretrain.is_empty() {
                default_pretrain(config.seed, &target)?
            } else {
                pretrain.iter().map(|p| load_dataset(p)).collect::<Result<_>>()?
            };
            let mut state = fit_with_progress(&config, &pre, &target, |e| {
                let stage = match e.stage {
                    Stage::Pretrain => "pretrain",
                    Stage::Finetune => "finetune",
                };
                let _ = writeln!(
                    err,
                    "epoch {stage} {} total={:.6} contrastive={:.6} reconstruction={:.6}",
                    e.epoch, e.loss.total, e.loss.contrastive, e.loss.reconstruction
                );
            })?;
            state.threshold = Some(calibrate_threshold(&state.params, &target, &state.config)?);
            save_checkpoint(&state, &ckpt)?;
            emit(
                out,
                json!({
                    "checkpoint": ckpt,
                    "epochs": state.epoch,
                    "final_loss": state.history.last().map(|e| e.loss),
                    "threshold": state.threshold,
                    "checksum": state.params.checksum(),
                }),
            )
        }
        Command::Eval {
            data,
            ckpt,
            report,
            ablate: run_ablation,
            seeds,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let csv_path = report.with_extension("csv");
            if run_ablation {
                let result = ablate(&state.config, &ds, &seeds)?;
                write_text(&report, &result.to_json())?;
                write_text(&csv_path, &result.to_csv())?;
                let summary: Vec<_> = result
                    .variants
                    .iter()
                    .map(|v| json!({"variant": v.variant, "image_auc": v.image_auc, "pixel_auc": v.pixel_auc, "iou": v.iou}))
                    .collect();
                emit(out, json!({"report": report, "csv": csv_path, "variants": summary}))
            } else {
                let r = evaluate(&state.params, &ds, &state.config)?;
                write_text(&report, &r.to_json())?;
                write_text(&csv_path, &r.to_csv("CLAD"))?;
                emit(
                    out,
                    json!({
                        "report": report,
                        "csv": csv_path,
                        "image_auc": r.image_auc,
                        "pixel_auc": r.pixel_auc,
                        "iou": r.iou,
                        "threshold": r.threshold,
                    }),
                )
            }
        }
        Command::Score(args) => {
            let (state, image, tokens, threshold) = prepare(&args)?;
            let r = score_image(&state.params, &image, &tokens, state.config.sigma, threshold)?;
            emit(out, serde_json::to_value(r)?)
        }
        Command::Localize { score: args, out: path } => {
            let (state, image, tokens, threshold) = prepare(&args)?;
            let loc = localize(&state.params, &image, &tokens, state.config.sigma, threshold)?;
            std::fs::write(&path, heatmap_pgm(&loc.pixel_scores)?).map_err(|e| CladError::io(&path, e))?;
            emit(out, serde_json::to_value(loc.result)?)
        }
    }
}

fn prepare(args: &ScoreArgs) -> Result<(TrainState, Tensor, Vec<usize>, f64)> {
    let state = load_checkpoint(&args.ckpt)?;
    let bytes = std::fs::read(&args.image).map_err(|e| CladError::io(&args.image, e))?;
    let image = netpbm::decode(&bytes, &args.image)?;
    let tokens = tokenize(&args.text, &state.config.vocab)?;
    let threshold = args.threshold.or(state.threshold).ok_or_else(|| {
        CladError::usage("the checkpoint stores no threshold; pass --threshold")
    })?;
    Ok((state, image, tokens, threshold))
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| CladError::io("<stdout>", e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CladError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CladError::io(path, e))
}
