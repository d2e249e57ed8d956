//! Command-line front end: `train`, `uq`, `verify` and `report`, all driven
//! by one INI config.
//!
//! Exit codes: 0 on success, 1 on invalid input or a failed command, 2 when
//! `verify` finds a sampler outside tolerance.

pub mod commands;
pub mod config;
pub mod run_dir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_report, cmd_train, cmd_uq, cmd_verify, ReportCommand, Selection, UqOptions, UqSummary, VerifyOptions,
};
pub use config::{ExperimentConfig, ScheduleSpec, UqConfig, VerifyConfig};
pub use run_dir::RunDir;

use crate::continuous::QuadratureRule;
use crate::error::{Error, Result};
use crate::moments::SamplerKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_ACCEPTANCE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bayesdiff", version, about = "Pixel-wise uncertainty for diffusion samplers")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy network and fit its last-layer posterior.
    Train { config: PathBuf },
    /// Generate with uncertainty and append result rows.
    Uq {
        config: PathBuf,
        /// Comma-separated sampler names.
        #[arg(long, value_delimiter = ',')]
        samplers: Option<Vec<SamplerKind>>,
        /// Monte-Carlo sample size.
        #[arg(long = "s")]
        mc_samples: Option<usize>,
        /// Skipping interval; 0 runs full BayesDiff.
        #[arg(long)]
        skip: Option<usize>,
        /// Generations per sampler.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Check the moment engine against the closed form and an ensemble.
    Verify {
        config: PathBuf,
        #[arg(long)]
        only: Option<SamplerKind>,
        /// Largest accepted |z| against the ensemble.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Studies over stored or fresh runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ReportArgs {
    config: PathBuf,
    /// Sampler of the runs to read (default: first configured).
    #[arg(long, global = true)]
    sampler: Option<SamplerKind>,
    /// Skipping interval of the runs to read (default: configured).
    #[arg(long, global = true)]
    skip: Option<usize>,
    /// Monte-Carlo sample size of the runs to read (default: configured).
    #[arg(long = "s", global = true)]
    mc_samples: Option<usize>,
    #[command(subcommand)]
    which: ReportWhich,
}

#[derive(Debug, Subcommand)]
enum ReportWhich {
    /// mu + sigma filter (or a fixed fraction) and the score histogram.
    Filter {
        /// Remove this fraction of the most uncertain runs instead.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Five groups by descending uncertainty with k-NN precision/recall.
    Quintiles,
    /// Rank agreement of skip intervals with full BayesDiff on fresh seeds.
    SkipConsistency {
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,8")]
        intervals: Vec<usize>,
        #[arg(long, default_value_t = 96)]
        seeds: usize,
    },
    /// Variants of one run resampled from its moments at `t_star`.
    Resample {
        #[arg(long)]
        run_id: usize,
        #[arg(long)]
        t_star: Option<usize>,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Spread of generations from perturbed starting points per base seed.
    Adjacent {
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Discrete against continuous-time variance over reverse intervals.
    ContinuousCheck {
        /// `i,j` with `i <= j`; `T` stands for the last step. Repeatable.
        #[arg(long = "interval", default_value = "0,T")]
        intervals: Vec<String>,
        #[arg(long, default_value_t = 0)]
        run_id: usize,
        #[arg(long, default_value = "trapezoid")]
        rule: QuadratureRule,
    },
}

fn parse_interval(text: &str, steps: usize) -> Result<(usize, usize)> {
    let bound = |s: &str| -> Result<usize> {
        match s.trim() {
            "T" => Ok(steps),
            other => other.parse().map_err(|_| Error::InvalidArgument(format!("bad interval bound `{other}`"))),
        }
    };
    match text.split_once(',') {
        Some((i, j)) => Ok((bound(i)?, bound(j)?)),
        None => Err(Error::InvalidArgument(format!("interval `{text}` is not `i,j`"))),
    }
}

/// Outcome of a command, before mapping to an exit code.
enum Outcome {
    Done,
    AcceptanceFailed,
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Train { config } => {
            cmd_train(&ExperimentConfig::load(&config)?)?;
        }
        Command::Uq { config, samplers, mc_samples, skip, n } => {
            cmd_uq(&ExperimentConfig::load(&config)?, &UqOptions { samplers, mc_samples, skip, n })?;
        }
        Command::Verify { config, only, tolerance } => {
            let verdicts = cmd_verify(&ExperimentConfig::load(&config)?, &VerifyOptions { only, tolerance })?;
            if verdicts.iter().any(|v| !v.passed()) {
                return Ok(Outcome::AcceptanceFailed);
            }
        }
        Command::Report(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let sel = Selection { sampler: args.sampler, skip: args.skip, mc_samples: args.mc_samples };
            let cmd = match args.which {
                ReportWhich::Filter { fraction, bins } => ReportCommand::Filter { fraction, bins },
                ReportWhich::Quintiles => ReportCommand::Quintiles,
                ReportWhich::SkipConsistency { intervals, seeds } => {
                    ReportCommand::SkipConsistency { intervals, seeds }
                }
                ReportWhich::Resample { run_id, t_star, n } => ReportCommand::Resample { run_id, t_star, n },
                ReportWhich::Adjacent { seeds, eta, n } => ReportCommand::Adjacent { seeds, eta, n },
                ReportWhich::ContinuousCheck { intervals, run_id, rule } => {
                    let steps = cfg.schedule.steps();
                    let intervals = intervals.iter().map(|s| parse_interval(s, steps)).collect::<Result<Vec<_>>>()?;
                    ReportCommand::ContinuousCheck { intervals, run_id, rule }
                }
            };
            for path in cmd_report(&cfg, &sel, &cmd)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(Outcome::Done)
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Only the first pool configuration in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::AcceptanceFailed) => EXIT_ACCEPTANCE,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}
