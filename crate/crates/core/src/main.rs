// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use chronoq::cascade::Scenario;
use chronoq::runner::config::{SweepKind, MAX_SEED};
use chronoq::runner::output::fmt_f64;
use chronoq::runner::{
    cmd_analyze, cmd_predict, cmd_simulate, load_config, threads_from_env, AnalyzeOptions, RunnerError, EXIT_OK,
    EXIT_USAGE,
};

#[derive(Parser)]
#[command(name = "chronoq", version, about = "Cascaded quantum two-way time transfer simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment config layered over its `defaults` preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Campaign seed, overriding the config.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Crc,
    Irc,
    #[value(name = "irc-fc")]
    IrcFc,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Crc => Scenario::Crc,
            ScenarioArg::Irc => Scenario::Irc,
            ScenarioArg::IrcFc => Scenario::IrcFc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Distance,
    Skew,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic distance and skew sweeps.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        sweep: Option<SweepArg>,
    },
    /// Simulate and measure a full campaign.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Re-measure stored tag files or post-process a campaign CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Tag files, campaign CSVs, or simulate output directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        demean: bool,
        #[arg(long, default_value_t = 1)]
        drift_degree: usize,
        #[arg(long)]
        tdev_column: Option<String>,
        #[arg(long)]
        histograms: bool,
    },
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    let common = match &cli.command {
        Command::Predict { common, .. } | Command::Simulate { common } | Command::Analyze { common, .. } => common,
    };
    let level = if common.quiet { "error" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunnerError::Runtime(e.to_string()))?;
    }
    let explicit_config = common.config.is_some();
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(s) = common.scenario {
        cfg.scenario = s.into();
    }
    let quiet = common.quiet;
    match cli.command {
        Command::Predict { common, sweep } => {
            let sweep = sweep.map(|s| match s {
                SweepArg::Distance => SweepKind::Distance,
                SweepArg::Skew => SweepKind::Skew,
                SweepArg::Both => SweepKind::Both,
            });
            let paths = cmd_predict(&cfg, &common.out, sweep)?;
            if !quiet {
                for p in paths {
                    println!("wrote {}", p.display());
                }
            }
        }
        Command::Simulate { common } => {
            let report = cmd_simulate(&cfg, &common.out)?;
            if !quiet {
                let f = |v: Option<f64>| v.map_or("n/a".to_string(), fmt_f64);
                println!(
                    "{}: {} intervals, {} flagged, total offset SD {} ps (predicted {} ps)",
                    cfg.scenario.name(),
                    report.n_intervals,
                    report.n_flagged,
                    f(report.total_sd_ps),
                    f(report.predicted_sd_ps)
                );
                println!("outputs in {}", common.out.display());
            }
        }
        Command::Analyze { common, inputs, demean, drift_degree, tdev_column, histograms } => {
            let opts = AnalyzeOptions { demean, drift_degree, tdev_column, histograms };
            let overrides = explicit_config || common.seed.is_some() || common.scenario.is_some();
            let paths = cmd_analyze(&inputs, overrides.then_some(&cfg), &opts, &common.out)?;
            if !quiet {
                for p in paths {
                    println!("wrote {}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("chronoq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
