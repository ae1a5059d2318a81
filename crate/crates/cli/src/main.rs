use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dwvit::data::{load_cifar10, synthetic_dataset, ChannelStats, DatasetKind, Split};
use dwvit::model::{load_checkpoint, ComplexityReport, ModelConfig};
use dwvit::train::gradcheck::{model_suite, op_suite};
use dwvit::train::{evaluate, train, RunConfig, TrainOptions, CHECKPOINT_FILE, METRICS_FILE};

#[derive(Parser)]
#[command(
    name = "dwvit",
    version,
    about = "Vision Transformer with depth-wise convolution bypass branches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a run config.
    Train {
        /// TOML file with [model], [train] and [data] tables.
        #[arg(long)]
        config: PathBuf,
        /// CIFAR-10 directory; overrides `data.root`. Ignored for synthetic data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for metrics.csv, best.ckpt and config.toml.
        #[arg(long)]
        out: PathBuf,
        /// Single-threaded run with reproducible output files.
        #[arg(long)]
        deterministic: bool,
        /// Suppress per-epoch progress.
        #[arg(long)]
        quiet: bool,
    },
    /// Top-1 accuracy of a checkpoint on the CIFAR-10 test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CIFAR-10 directory holding test_batch.bin.
        #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Evaluate on this many synthetic images instead.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Seed of the synthetic draw.
        #[arg(long, default_value_t = 0, requires = "synthetic")]
        seed: u64,
        /// Only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
    },
    /// Parameter and FLOP counts of a model.
    Analyze {
        /// Run config or bare model config.
        #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// vit_tiny, vit_tiny_200, vit_small or desk.
        #[arg(long)]
        preset: Option<String>,
        /// Leave branch BatchNorm out of the parameter count.
        #[arg(long)]
        paper_convention: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Finite-difference gradient checks in 64-bit mode.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Scope {
    Ops,
    Model,
    All,
}

fn run_train(config: PathBuf, data: Option<PathBuf>, out: PathBuf, deterministic: bool, quiet: bool) -> Result<()> {
    let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
    let mut run = RunConfig::from_toml(&text).with_context(|| format!("in {}", config.display()))?;
    match (run.data.kind, data) {
        (DatasetKind::Cifar10Binary, Some(dir)) => run.data.root = Some(dir),
        (DatasetKind::Synthetic, Some(_)) => eprintln!("note: --data is ignored for synthetic data"),
        _ => {}
    }
    let options = TrainOptions {
        deterministic,
        out_dir: Some(out.clone()),
        verbose: !quiet,
    };
    let (outcome, source) = train(&run, &options)?;
    println!("data: {source}");
    println!(
        "best val_top1 {:.4} at epoch {} of {}",
        outcome.best_val_top1,
        outcome.best_epoch,
        outcome.records.len()
    );
    println!(
        "wrote {} and {}",
        out.join(METRICS_FILE).display(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn run_eval(
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    synthetic: Option<usize>,
    seed: u64,
    limit: Option<usize>,
    batch_size: usize,
) -> Result<()> {
    let (mut model, meta) =
        load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (set, source) = match (data, synthetic) {
        (Some(dir), _) => (
            load_cifar10(&dir, Split::Test)?,
            format!("CIFAR-10 test split at {}", dir.display()),
        ),
        (None, Some(n)) => (
            synthetic_dataset(n, model.config.num_classes, seed),
            format!("{n} synthetic images, seed {seed}"),
        ),
        (None, None) => bail!("either --data or --synthetic is required"),
    };
    let set = match limit {
        Some(n) => set.subset(n)?,
        None => set,
    };
    let stats = match meta.normalization {
        Some(s) => s,
        None => {
            eprintln!("note: checkpoint has no normalization; using statistics of the evaluation set");
            ChannelStats::compute(&set)
        }
    };
    let top1 = evaluate(&mut model, &set, &stats, batch_size)?;
    println!("top1 {top1:.4} on {} samples ({source})", set.len());
    Ok(())
}

fn run_analyze(config: Option<PathBuf>, preset: Option<String>, paper_convention: bool, format: Format) -> Result<()> {
    let cfg = match (config, preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            ModelConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
        }
        (None, Some(name)) => ModelConfig::preset(&name)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    let report = ComplexityReport::analyze(&cfg, paper_convention);
    match format {
        Format::Text => print!("{}", report.to_text()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn run_gradcheck(scope: Scope) -> Result<bool> {
    let mut reports = Vec::new();
    if scope != Scope::Model {
        reports.extend(op_suite()?);
    }
    if scope != Scope::Ops {
        reports.push(model_suite()?);
    }
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            data,
            out,
            deterministic,
            quiet,
        } => run_train(config, data, out, deterministic, quiet).map(|_| true),
        Command::Eval {
            checkpoint,
            data,
            synthetic,
            seed,
            limit,
            batch_size,
        } => run_eval(checkpoint, data, synthetic, seed, limit, batch_size).map(|_| true),
        Command::Analyze {
            config,
            preset,
            paper_convention,
            format,
        } => run_analyze(config, preset, paper_convention, format).map(|_| true),
        Command::Gradcheck { scope } => run_gradcheck(scope),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
