//! Operator surface for the slice-attention MIL library: generate synthetic
//! bag datasets, train, evaluate, count costs, and export assignment
//! heatmaps. Every error exits nonzero with a one-line machine-parseable
//! reason; exit codes distinguish configuration (2), data (3), and runtime
//! (4) failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use caprmil::{Aggregator, ErrorCategory, Result};

mod commands;
mod pgm;
mod settings;

use commands::{CostOptions, EvalOptions, GenOptions, HeatmapOptions, TrainOptions};
use settings::Settings;

#[derive(Parser)]
#[command(name = "caprmil", version, about = "Slice-attention MIL toolkit")]
struct Cli {
    /// Base seed for anything stochastic (overrides the settings file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Thread count recorded in reports; compute kernels are single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// `key = value` settings file (model + training field names).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregatorArg {
    Mean,
    Attn,
    Gattn,
}

impl From<AggregatorArg> for Aggregator {
    fn from(a: AggregatorArg) -> Aggregator {
        match a {
            AggregatorArg::Mean => Aggregator::Mean,
            AggregatorArg::Attn => Aggregator::Attn,
            AggregatorArg::Gattn => Aggregator::GAttn,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bag dataset directory.
    Gen {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Difficulty preset: hard (low witness rate, large bags) or easy.
        #[arg(long, default_value = "hard")]
        preset: String,
        #[arg(long, default_value_t = 100)]
        bags_per_class: usize,
        /// Override the preset's smallest bag size.
        #[arg(long)]
        n_min: Option<usize>,
        /// Override the preset's largest bag size.
        #[arg(long)]
        n_max: Option<usize>,
        /// Override the preset's feature width.
        #[arg(long)]
        d_in: Option<usize>,
        /// Override the preset's witness rate (fraction in (0, 1]).
        #[arg(long)]
        witness_rate: Option<f64>,
        /// Override the preset's background morphology count.
        #[arg(long)]
        morphologies: Option<usize>,
        /// Override the preset's signal-to-background separation.
        #[arg(long)]
        separation: Option<f64>,
        /// Override the preset's per-feature noise level.
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Per-class fraction of bags tagged as the validation split.
        #[arg(long, default_value_t = 0.15)]
        val_frac: f64,
        /// Per-class fraction of bags tagged as the test split.
        #[arg(long, default_value_t = 0.2)]
        test_frac: f64,
    },
    /// Train a model on a generated dataset and write the best checkpoint.
    Train {
        /// Dataset directory (or manifest file).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Epoch log path (default: checkpoint path with .tsv extension).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Pooling head, overriding the settings file.
        #[arg(long)]
        aggregator: Option<AggregatorArg>,
        /// Sweep an ablation axis instead of a single run, e.g.
        /// `--ablate clusters=2,4,8,16`; repeatable (clusters/heads/ratios).
        #[arg(long)]
        ablate: Vec<String>,
        /// Keep every k-th cell of the ablation grid.
        #[arg(long, default_value_t = 1)]
        subsample: usize,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (or manifest file).
        #[arg(long)]
        data: PathBuf,
        /// Which split to score: train, val, or test.
        #[arg(long)]
        split: String,
    },
    /// Print parameter counts and the analytic FLOP law; optionally run the
    /// timing sweep.
    Cost {
        /// Bag size to evaluate the FLOP law at.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Run the timing sweep over these bag sizes: `1000..16000`
        /// (doubling) or a comma list.
        #[arg(long)]
        sweep: Option<String>,
        /// Timing repeats per bag size (median is reported; minimum 3).
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also write the sweep dump (N, median_seconds, analytic_flops)
        /// here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Pooling head, overriding the settings file.
        #[arg(long)]
        aggregator: Option<AggregatorArg>,
    },
    /// Export per-token assignment-weight images and a top-k patch listing
    /// for one bag.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single bag file with patch coordinates.
        #[arg(long)]
        bag: PathBuf,
        /// Output directory for the images and listing.
        #[arg(long)]
        out: PathBuf,
        /// Attention head to visualize.
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Attention block to visualize.
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Patches to list per token.
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen {
            out,
            preset,
            bags_per_class,
            n_min,
            n_max,
            d_in,
            witness_rate,
            morphologies,
            separation,
            noise_sigma,
            val_frac,
            test_frac,
        } => commands::cmd_gen(&GenOptions {
            out,
            preset,
            bags_per_class,
            n_min,
            n_max,
            d_in,
            witness_rate,
            morphologies,
            separation,
            noise_sigma,
            val_frac,
            test_frac,
            seed: cli.seed.unwrap_or(settings.train.seed),
        }),
        Command::Train {
            data,
            out,
            log,
            aggregator,
            ablate,
            subsample,
        } => commands::cmd_train(
            &TrainOptions {
                data,
                out,
                log,
                aggregator: aggregator.map(Into::into),
                ablate,
                subsample,
                seed: cli.seed,
            },
            &settings,
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => commands::cmd_eval(&EvalOptions {
            checkpoint,
            data,
            split,
        }),
        Command::Cost {
            n,
            sweep,
            repeats,
            csv,
            aggregator,
        } => commands::cmd_cost(
            &CostOptions {
                n,
                sweep,
                repeats,
                csv,
                aggregator: aggregator.map(Into::into),
                threads: cli.threads,
            },
            &settings,
        ),
        Command::Heatmap {
            checkpoint,
            bag,
            out,
            head,
            block,
            k,
        } => commands::cmd_heatmap(&HeatmapOptions {
            checkpoint,
            bag,
            out,
            head,
            block,
            k,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, name) = match err.category() {
                ErrorCategory::Config => (2, "config"),
                ErrorCategory::Data => (3, "data"),
                ErrorCategory::Runtime => (4, "runtime"),
            };
            eprintln!("error: {name}: {err}");
            ExitCode::from(code)
        }
    }
}
