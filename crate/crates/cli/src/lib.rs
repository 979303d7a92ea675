//! `vbquant`: phantoms, training, segmentation, quantification and
//! human-in-the-loop sessions from the command line.
//!
//! Exit codes: 0 success, 1 internal failure, 2 invalid input
//! (errors carrying [`InvalidInput`] in their chain).

pub mod commands;
pub mod dataset;

pub use commands::run;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vbquant_core::quantify::HuRange;

#[derive(Debug, Parser)]
#[command(name = "vbquant", version, about = "Lung infection segmentation and quantification on CT")]
pub struct Cli {
    /// JSON settings file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// `pz,py,px`.
    #[arg(long, value_parser = parse_patch)]
    pub patch_size: Option<[usize; 3]>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom cohort.
    Phantom {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a phantom dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hold out the last N cases for per-epoch Dice.
        #[arg(long)]
        holdout: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Segment a CT volume with a trained checkpoint.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Volumes, POIs, HU histogram and GGO/consolidation split of one scan.
    Quantify {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        ggo_range: Option<HuRange>,
        #[arg(long, allow_hyphen_values = true)]
        consolidation_range: Option<HuRange>,
    },
    /// Compare predicted masks with references, per case or over a dataset.
    Compare {
        #[arg(long, required_unless_present = "data")]
        reference: Option<PathBuf>,
        #[arg(long, required_unless_present = "data")]
        prediction: Option<PathBuf>,
        #[arg(long, required_unless_present = "data")]
        volume: Option<PathBuf>,
        #[arg(long, required_unless_present = "data")]
        regions: Option<PathBuf>,
        /// Dataset directory for batch mode.
        #[arg(long, requires = "predictions")]
        data: Option<PathBuf>,
        /// Directory with one `<id>.nii` prediction per case.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a human-in-the-loop session over HTTP.
    HitlServe {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        threshold: Option<f32>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Run a session end to end with a simulated annotator.
    HitlSimulate {
        #[arg(long)]
        session: PathBuf,
        /// Corrector settings (JSON); defaults to the session file's.
        #[arg(long)]
        corrector: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
}

fn parse_patch(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("bad patch size {s:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [n] => Ok([*n; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(format!("patch size needs 1 or 3 values, got {s:?}")),
    }
}

/// Marks an error as caused by the caller's input (exit code 2).
#[derive(Debug)]
pub struct InvalidInput;

impl fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid input")
    }
}
