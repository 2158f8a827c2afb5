use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hazeflow::harness::{
    cmd_calibrate, cmd_evaluate, cmd_plot, cmd_predict, cmd_simulate, cmd_train, load_config, ExperimentConfig,
};
use hazeflow::{Error, ErrorKind, Result};

/// Simulate, train, sample and assess a guided flow-matching dehazer.
#[derive(Parser, Debug)]
#[command(name = "hazeflow", version)]
struct Cli {
    /// Experiment config (TOML), or a run manifest written by an earlier command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the command's own randomness (signals and noise, training, or sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of Euler steps (and training time-grid size for `train`).
    #[arg(long = "steps-t", global = true)]
    steps_t: Option<usize>,
    /// Posterior samples per input.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Checkpoint to resume from (`train`) or to sample with.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the paired train/val/test dataset.
    Simulate,
    /// Train the velocity network.
    Train,
    /// Draw posterior samples for a raster, a folder of rasters or a dataset split.
    Predict {
        #[arg(long, conflicts_with = "split")]
        input: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Fit the spread-vs-error calibration line on a prediction folder.
    Calibrate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Split whose predictions to use when `--predictions` is absent.
        #[arg(long)]
        split: Option<String>,
        /// Prediction folder to receive calibrated spread maps.
        #[arg(long)]
        apply: Option<PathBuf>,
    },
    /// Score predictions against ground truth, with sample-count and step sweeps.
    Evaluate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Redraw plots from a loss log, a report, or a folder holding them.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Divergence => 4,
        ErrorKind::Incompatible => 5,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Divergence => "divergence",
        ErrorKind::Incompatible => "incompatible",
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Simulate => {
                overrides.push(format!("dataset.signal.seed={seed}"));
                overrides.push(format!("dataset.noise.seed={seed}"));
            }
            Command::Train => overrides.push(format!("train.seed={seed}")),
            _ => overrides.push(format!("sample.seed={seed}")),
        }
    }
    if let Some(t) = cli.steps_t {
        overrides.push(format!("sample.steps_t={t}"));
        if matches!(cli.command, Command::Train) {
            overrides.push(format!("train.steps_t={t}"));
        }
    }
    if let Some(k) = cli.samples {
        overrides.push(format!("sample.n_samples={k}"));
    }
    load_config(path, &overrides)
}

fn split_predictions(cfg: &ExperimentConfig, split: &str) -> PathBuf {
    cfg.paths.workdir.join("predictions").join(split)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Plot { input } = &cli.command {
        let out = cli.out.clone().unwrap_or_else(|| input_dir(input));
        for p in cmd_plot(input, &out)? {
            println!("plot: {}", p.display());
        }
        return Ok(());
    }
    let cfg = load(cli)?;
    match &cli.command {
        Command::Simulate => {
            let out = cmd_simulate(&cfg)?;
            println!("dataset: {}", out.dataset_dir.display());
            println!("pairs: {}", out.manifest.all_seeds().len());
            println!("manifest: {}", out.run_manifest.display());
        }
        Command::Train => {
            let out = cmd_train(&cfg, cli.checkpoint.as_deref())?;
            println!("iterations: {}", out.iterations);
            println!("loss log: {}", out.loss_log.display());
            if let Some(b) = &out.best_checkpoint {
                println!("best checkpoint: {}", b.display());
            }
            println!("final checkpoint: {}", out.final_checkpoint.display());
        }
        Command::Predict { input, split } => {
            let checkpoint = require_checkpoint(cli)?;
            let split = split.clone().unwrap_or_else(|| cfg.calibration.apply_split.clone());
            let input = input.clone().unwrap_or_else(|| cfg.paths.dataset_dir().join(&split));
            let out = cli.out.clone().unwrap_or_else(|| split_predictions(&cfg, &split));
            let res = cmd_predict(&cfg, checkpoint, &input, &out)?;
            println!("images: {}", res.predictions.entries.len());
            println!("samples per image: {}", cfg.sample.n_samples);
            println!("predictions: {}", res.out_dir.display());
        }
        Command::Calibrate {
            predictions,
            split,
            apply,
        } => {
            let split = split.clone().unwrap_or_else(|| cfg.calibration.fit_split.clone());
            let predictions = predictions.clone().unwrap_or_else(|| split_predictions(&cfg, &split));
            let out = cli.out.clone().unwrap_or_else(|| cfg.paths.workdir.join("calibration"));
            let report = cmd_calibrate(&cfg, &predictions, &out, apply.as_deref())?;
            println!("alpha: {}", report.fit.alpha);
            println!("beta: {}", report.fit.beta);
            println!("spearman: {}", report.spearman);
            println!("n_bins: {}", report.n_bins);
            for f in &report.flags {
                println!("flag: {f}");
            }
            println!("report: {}", out.display());
        }
        Command::Evaluate { predictions, split } => {
            let split = split.clone().unwrap_or_else(|| cfg.calibration.apply_split.clone());
            let predictions = predictions.clone().unwrap_or_else(|| split_predictions(&cfg, &split));
            let out = cli.out.clone().unwrap_or_else(|| cfg.paths.workdir.join("evaluation"));
            let report = cmd_evaluate(&cfg, &predictions, cli.checkpoint.as_deref(), &out)?;
            println!("psnr_affine mmse: {:.3}", report.mmse.aggregate.psnr_affine.mean);
            println!("psnr_affine input: {:.3}", report.input.aggregate.psnr_affine.mean);
            println!("uplift_db: {:.3}", report.uplift_db);
            for row in &report.k_sweep {
                println!("k={} psnr={:.3}", row.k, row.psnr_mmse);
            }
            for row in &report.t_sweep {
                println!("T={} psnr={:.3}", row.steps_t, row.psnr_mmse);
            }
            for f in &report.flagged {
                println!("flagged {}: {}", f.id, f.reason);
            }
            println!("report: {}", out.display());
        }
        Command::Plot { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn input_dir(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.to_path_buf()
    } else {
        input.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn require_checkpoint(cli: &Cli) -> Result<&Path> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error code={} kind={} message={msg:?}", exit_code(kind), kind_name(kind));
            ExitCode::from(exit_code(kind))
        }
    }
}
