use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seqcal_core::metrics::TokenClass;
use seqcal_core::PartitionSpec;

/// Calibration metrics, recalibration and sequence-level experiments for
/// autoregressive models.
#[derive(Debug, Parser)]
#[command(name = "seqcal", version, about)]
pub struct Cli {
    /// Seed for every random choice (fit initialization, sampling, toy data).
    #[arg(long, global = true, env = "SEQCAL_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for the parallel reductions.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,

    /// Directory that receives reports; created if missing.
    #[arg(long, global = true, default_value = "seqcal-out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Token-level calibration report for a log file.
    Stats(StatsArgs),
    /// Fit a calibrator on validation logs.
    Fit(FitArgs),
    /// Recalibrate every record of a log file.
    Apply(ApplyArgs),
    /// Structured ECE of a toy model on held-out sources.
    Seqcal(SeqcalArgs),
    /// Synthetic task utilities.
    #[command(subcommand)]
    Toy(ToyCommand),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub logs: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    pub bins: u32,
    /// Weighted ECE over the full distribution instead of top-1 ECE.
    #[arg(long)]
    pub weighted: bool,
    /// `eos`, `token:ID`, `entropy:H` or `headtail:T1,T2,...`.
    #[arg(long, value_parser = parse_partition)]
    pub partition: Option<Partition>,
    /// Coverage threshold used when features must be derived from attention.
    #[arg(long, default_value_t = 0.35, value_parser = parse_unit_open)]
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Partition {
    Groups(PartitionSpec),
    HeadTail(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Variable,
    Single,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub logs: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Use `1 + σ` factors so the inverse temperature lies in (1, 4).
    #[arg(long)]
    pub plus_one: bool,
    /// Coverage threshold.
    #[arg(long, default_value_t = 0.35, value_parser = parse_unit_open)]
    pub delta: f64,
    #[arg(long)]
    pub params_out: PathBuf,
    #[arg(long, default_value_t = 3000, value_parser = clap::value_parser!(u32).range(1..))]
    pub max_epochs: u32,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub logs: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub logs_out: PathBuf,
    #[arg(long, default_value_t = 0.35, value_parser = parse_unit_open)]
    pub delta: f64,
}

#[derive(Debug, Args)]
pub struct SeqcalArgs {
    /// Toy task spec (JSON).
    #[arg(long)]
    pub task: PathBuf,
    /// `true` for the task's own model, or a distortion spec (JSON).
    #[arg(long)]
    pub model: String,
    /// Wrap the model in this calibrator.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub samples: u32,
    /// Number of held-out sources.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    pub bins: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub beam: u32,
    #[arg(long, default_value_t = 0.35, value_parser = parse_unit_open)]
    pub delta: f64,
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Teacher-forced logs of a (possibly distorted) toy model.
    Gen(GenArgs),
    /// Corpus BLEU at several beam widths.
    Beamsweep(BeamsweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Number of sequences.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub distort: Option<PathBuf>,
    #[arg(long)]
    pub logs_out: PathBuf,
    #[arg(long, default_value_t = 0.35, value_parser = parse_unit_open)]
    pub delta: f64,
}

#[derive(Debug, Args)]
pub struct BeamsweepArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub distort: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub beams: Vec<u32>,
    /// Number of held-out sources.
    #[arg(long, default_value_t = 500)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 0.35, value_parser = parse_unit_open)]
    pub delta: f64,
}

fn parse_unit_open(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err(format!("{x} is outside (0, 1)"))
    }
}

fn parse_number(s: &str) -> Result<f64, String> {
    let x: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("'{s}' is not finite"))
    }
}

pub fn parse_partition(s: &str) -> Result<Partition, String> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    let spec = match (kind, arg) {
        ("eos", None) => Partition::Groups(PartitionSpec::TokenClass(TokenClass::Eos)),
        ("token", Some(id)) => {
            let id = id.parse().map_err(|_| format!("'{id}' is not a token id"))?;
            Partition::Groups(PartitionSpec::TokenClass(TokenClass::Token(id)))
        }
        ("entropy", Some(h)) => Partition::Groups(PartitionSpec::EntropySplit {
            threshold: parse_number(h)?,
        }),
        ("headtail", Some(list)) => {
            let ts = list.split(',').map(parse_number).collect::<Result<Vec<_>, _>>()?;
            if ts.is_empty() || ts.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
                return Err("head/tail thresholds must lie in (0, 1]".into());
            }
            Partition::HeadTail(ts)
        }
        _ => {
            return Err(format!(
                "unknown partition '{s}'; expected eos, token:ID, entropy:H or headtail:T1,T2,..."
            ))
        }
    };
    if let Partition::Groups(g) = &spec {
        g.validate().map_err(|e| e.to_string())?;
    }
    Ok(spec)
}
