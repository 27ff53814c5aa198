//! The `austkit` command line.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::metrics::ApMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "austkit", version, about = "Inharmonious region localization toolkit")]
pub struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    /// TOML file with one table per command ([gen], [train], ...).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic composite dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write predicted masks for individual images.
    Predict(PredictArgs),
    /// Dump per-stage voting maps and auxiliary masks for one image.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Inharmonious regions per image: `N` or an inclusive range `A..B`.
    /// Any range reaching past 1 switches to multi-region scenes.
    #[arg(long, value_parser = parse_range)]
    pub regions: Option<(usize, usize)>,
    /// Image size, `S` or `HxW`.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight votes by ground-truth semantic similarity.
    #[arg(long)]
    pub semantic: bool,
    /// Decoder stages, 1..=3.
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long, value_name = "STEPS")]
    pub checkpoint_every: Option<usize>,
    /// Train on the first N samples only.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "FILE", required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub ap_mode: Option<ApMode>,
    /// Also write predicted masks under `masks/`.
    #[arg(long)]
    pub save_masks: bool,
    /// Test hook: predict the ground truth itself.
    #[arg(long, hide = true, conflicts_with = "checkpoint")]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Input RGB PNG; repeatable.
    #[arg(long = "image", value_name = "PNG", required = true)]
    pub images: Vec<PathBuf>,
    /// Label PNG per image, required by semantic models.
    #[arg(long = "labels", value_name = "PNG")]
    pub labels: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PNG")]
    pub image: PathBuf,
    #[arg(long, value_name = "PNG")]
    pub labels: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Feed zero voting maps to the decoder.
    #[arg(long)]
    pub zero_voting: bool,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("{t:?} is not a count"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
        None => {
            let n = num(s)?;
            (n, n)
        }
    };
    if a == 0 || a > b {
        return Err(format!("empty or zero-based range {s:?}"));
    }
    Ok((a, b))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("{t:?} is not a size"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((num(h)?, num(w)?)),
        None => num(s).map(|n| (n, n)),
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USER,
            };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                EXIT_USER
            } else {
                EXIT_INTERNAL
            }
        }
    }
}

/// Build the global thread pool. Fails only if called twice with a bound.
fn init_threads(jobs: Option<usize>) -> Result<(), Error> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_sizes() {
        assert_eq!(parse_range("2..9"), Ok((2, 9)));
        assert_eq!(parse_range("2..=9"), Ok((2, 9)));
        assert_eq!(parse_range("3"), Ok((3, 3)));
        assert!(parse_range("0..2").is_err());
        assert!(parse_range("5..2").is_err());
        assert!(parse_range("a..b").is_err());
        assert_eq!(parse_size("48"), Ok((48, 48)));
        assert_eq!(parse_size("32x64"), Ok((32, 64)));
        assert!(parse_size("32x").is_err());
    }

    #[test]
    fn unknown_flags_are_user_errors() {
        assert_eq!(run(["austkit", "gen", "--out", "x", "--bogus"]), EXIT_USER);
        assert_eq!(run(["austkit", "frobnicate"]), EXIT_USER);
        assert_eq!(run(["austkit", "--help"]), EXIT_OK);
    }

    #[test]
    fn oracle_and_checkpoint_are_exclusive() {
        assert!(Cli::try_parse_from(["austkit", "eval", "--data", "d", "--out", "o"]).is_err());
        assert!(Cli::try_parse_from(["austkit", "eval", "--data", "d", "--out", "o", "--oracle"]).is_ok());
        assert!(Cli::try_parse_from(["austkit", "eval", "--data", "d", "--out", "o", "--oracle", "--checkpoint", "c"]).is_err());
    }
}
