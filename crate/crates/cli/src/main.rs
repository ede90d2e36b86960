mod common;
mod data;
mod eval;
mod segment;
mod suites;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use common::CliError;

#[derive(Parser)]
#[command(
    name = "ovseg",
    version,
    about = "Multi-resolution open-vocabulary segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Small CPU model on 128² images.
    Toy,
    /// Full-size model on 640² images.
    Default,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Semantic,
    Panoptic,
}

#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Run configuration JSON; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// Crop ratio override (0 disables slicing).
    #[arg(long)]
    p: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Segments one PPM image against a class vocabulary.
    Segment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory; its config is used when --config is absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// JSON array of class names.
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "semantic")]
        mode: Mode,
        /// Prompt templates, one per line.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Writes the slice and global-view images as tensor files.
        #[arg(long)]
        dump_slices: Option<PathBuf>,
        /// Writes every query's mask probability as a PGM.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Trains on synthetic images and writes a checkpoint.
    TrainToy {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Replaces every fused feature with zeros.
        #[arg(long)]
        no_fusion: bool,
        /// Also writes the training images in the evaluation layout.
        #[arg(long)]
        export_data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit mode.
    Gradcheck {
        #[arg(long, default_value_t = ovseg_core::gradcheck::DEFAULT_SEEDS)]
        seeds: u64,
        /// Skips the composite-module cases.
        #[arg(long)]
        primitives_only: bool,
        /// Deliberately corrupts a backward rule to exercise the checker.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiply-accumulate counts per module.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Vocabulary size assumed for the classifier.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Computes mIoU and panoptic quality over a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory with classes.json, images/, labels/ and optional instances/.
        #[arg(long, conflicts_with = "toy_split")]
        data: Option<PathBuf>,
        /// Synthetic split generated from the configured seed.
        #[arg(long, value_enum)]
        toy_split: Option<Split>,
        /// Scores label maps in this directory instead of running the model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "semantic")]
        mode: Mode,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Worker threads for per-image inference.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the resolved run configuration.
    DumpConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    SoftmaxSign,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Segment {
            cfg,
            checkpoint,
            image,
            classes,
            out,
            mode,
            templates,
            dump_slices,
            dump_masks,
        } => segment::run(segment::SegmentArgs {
            cfg,
            checkpoint,
            image,
            classes,
            out,
            mode,
            templates,
            dump_slices,
            dump_masks,
        }),
        Command::TrainToy {
            cfg,
            out,
            steps,
            no_fusion,
            export_data,
        } => train::run(&cfg, out, steps, no_fusion, export_data),
        Command::Gradcheck {
            seeds,
            primitives_only,
            fault,
            out,
        } => suites::gradcheck(
            seeds,
            primitives_only,
            fault.map(|FaultArg::SoftmaxSign| ovseg_core::autograd::Fault::SoftmaxGradSign),
            out,
        ),
        Command::Flops { cfg, classes, out } => suites::flops(&cfg, classes, out),
        Command::Eval {
            cfg,
            checkpoint,
            data,
            toy_split,
            predictions,
            mode,
            templates,
            jobs,
            out,
        } => eval::run(eval::EvalArgs {
            cfg,
            checkpoint,
            data,
            toy_split,
            predictions,
            mode,
            templates,
            jobs,
            out,
        }),
        Command::DumpConfig { cfg } => {
            let c = common::resolve_config(&cfg, None)?;
            println!("{}", c.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
