use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sop::evalkit::DEFAULT_KS;
use sop::model::GlobalFeature;
use sop_cli::{
    AblateArgs, CliError, EvalArgs, GenDataArgs, SplitArgs, TrainArgs, DEFAULT_MAX_CELLS,
};

#[derive(Parser)]
#[command(
    name = "sop",
    version,
    about = "Self-organizing prototype training on small image datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Feature {
    Cls,
    AvgPatch,
}

impl From<Feature> for GlobalFeature {
    fn from(f: Feature) -> Self {
        match f {
            Feature::Cls => GlobalFeature::Cls,
            Feature::AvgPatch => GlobalFeature::AvgPatch,
        }
    }
}

#[derive(clap::Args)]
struct Split {
    /// Fraction of the dataset used for training.
    #[arg(long, default_value_t = 0.8)]
    split_frac: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl From<&Split> for SplitArgs {
    fn from(s: &Split) -> Self {
        SplitArgs {
            frac: s.split_frac,
            seed: s.split_seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered image dataset.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Pixel noise standard deviation on the 0..255 scale.
        #[arg(long, default_value_t = 30.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split of a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        split: Split,
    },
    /// Evaluate the teacher of a checkpoint with k-NN and a linear probe.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: Split,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Feature::Cls)]
        feature: Feature,
        #[arg(long, default_value_t = 300)]
        probe_epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        probe_lr: f64,
        /// CSV file the k-NN results are appended to.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        tag: Option<String>,
        /// Write the test-split embeddings to this file.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Train every cell of a parameter grid and summarize k-NN accuracy.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base config the grid values override; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_CELLS)]
        max_cells: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Directory holding the per-cell runs (default: OUT/runs).
        #[arg(long)]
        runs_dir: Option<PathBuf>,
        #[command(flatten)]
        split: Split,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            classes,
            per_class,
            size,
            noise,
            seed,
            out,
        } => {
            let ds = sop_cli::gen_data(&GenDataArgs {
                classes,
                per_class,
                size,
                noise,
                seed,
                out: out.clone(),
            })?;
            println!("{} images, sha256 {}", ds.n, ds.digest());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            split,
        } => {
            let r = sop_cli::train(&TrainArgs {
                config,
                data,
                out,
                resume,
                split: (&split).into(),
            })?;
            println!(
                "{} steps run; final checkpoint {}",
                r.steps_run,
                r.final_checkpoint.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            split,
            ks,
            feature,
            probe_epochs,
            probe_lr,
            results,
            tag,
            export,
        } => {
            let report = sop_cli::eval(&EvalArgs {
                ckpt,
                data,
                split: (&split).into(),
                ks,
                feature: feature.into(),
                probe_epochs,
                probe_lr,
                results,
                tag,
                export,
            })?;
            print!("{}", report.render());
        }
        Command::Ablate {
            grid,
            data,
            out,
            config,
            max_cells,
            k,
            runs_dir,
            split,
        } => {
            let rows = sop_cli::ablate(&AblateArgs {
                grid,
                data,
                out: out.clone(),
                base_config: config,
                max_cells,
                knn_k: k,
                split: (&split).into(),
                runs_dir,
            })?;
            println!(
                "{} cells; summary in {}",
                rows.len(),
                out.join("summary.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    sop_cli::keep_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
