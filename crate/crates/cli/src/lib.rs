//! Command-line front-end: training, ERF maps, bias slices, Gaussian fits,
//! re-initialization experiments and gradient audits.

pub mod commands;
pub mod config;
pub mod grid;
pub mod heatmap;
pub mod images;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gablab", version, about = "Toy vision transformer laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SliceComponent {
    Rpe,
    Gab,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReinitComponent {
    Ape,
    Rpe,
    Gab,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the synthetic quadrant task; writes a checkpoint and a loss CSV.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        output: PathBuf,
        /// Loss curve path [default: the checkpoint path with a .csv extension].
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Effective receptive field of the central patch, exported as a heatmap.
    Erf {
        checkpoint: PathBuf,
        /// `noise:<seed>:<count>` or a directory of .ppm/.pgm images.
        #[arg(long, default_value = "noise:0:64")]
        images: String,
        #[arg(long)]
        output: PathBuf,
        /// Target patch [default: the central patch].
        #[arg(long)]
        target: Option<usize>,
    },
    /// Head-averaged attention-bias row of one patch, laid out on the grid.
    RpeSlice {
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        patch: usize,
        #[arg(long, value_enum, default_value = "both")]
        component: SliceComponent,
        /// Slice one head of the relative bias instead of the head average.
        #[arg(long)]
        head: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit a 2D Gaussian to a heatmap or raw grid file.
    Fit { input: PathBuf },
    /// ERF before and after redrawing one positional component.
    Reinit {
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        component: ReinitComponent,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long, default_value = "noise:0:64")]
        images: String,
    },
    /// Finite-difference audit of every differentiable op and the model gradients.
    Gradcheck {
        /// TOML run configuration; only `[model]` is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale one op's backward rule by 1.5 (harness self-test).
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}
