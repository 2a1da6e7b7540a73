use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use lakecast::cli;
use lakecast::config::RunConfig;
use lakecast::Result;

/// Bias-corrected GP forecasting of lake temperature profiles.
#[derive(Parser)]
#[command(name = "lakecast", version)]
struct Args {
    /// Run configuration (flat key = value file).
    #[arg(short, long, global = true, default_value = "lakecast.conf")]
    config: PathBuf,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic ensemble and field campaign.
    Simulate,
    /// Fit all models on the training window and save the engine state.
    Train,
    /// Advance the daily loop through a date, appending forecasts.
    Forecast {
        /// Last reference date to forecast (inclusive).
        #[arg(long, conflicts_with = "days")]
        through: Option<NaiveDate>,
        /// Number of daily steps to run.
        #[arg(long)]
        days: Option<u64>,
    },
    /// Retrospective forecasts for reference dates inside the training window.
    Hindcast {
        #[arg(long)]
        from: NaiveDate,
        #[arg(long)]
        to: NaiveDate,
    },
    /// Score stored forecasts against field data.
    Evaluate {
        #[arg(long)]
        from: Option<NaiveDate>,
        #[arg(long)]
        to: Option<NaiveDate>,
        /// Extra groupings besides horizon: all, depth, doy_bucket.
        #[arg(long, value_delimiter = ',')]
        by: Vec<String>,
    },
}

fn run(args: Args) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    match args.cmd {
        Cmd::Simulate => {
            let s = cli::cmd_simulate(&cfg)?;
            println!(
                "wrote {} ensemble rows over {} reference dates and {} field rows",
                s.ensemble_rows, s.ref_dates, s.field_rows
            );
        }
        Cmd::Train => {
            let e = cli::cmd_train(&cfg)?;
            println!("trained on {} inputs; next forecast {}", e.corpus.len(), e.current);
        }
        Cmd::Forecast { through, days } => {
            let through = match (through, days) {
                (Some(t), _) => t,
                (None, Some(n)) if n > 0 => {
                    let snap: lakecast::persist::EngineSnapshot =
                        lakecast::persist::load_checked(&cli::state_path(&cfg))?;
                    snap.current() + chrono::Days::new(n - 1)
                }
                _ => {
                    return Err(lakecast::Error::Config(
                        "forecast needs --through DATE or --days N (N ≥ 1)".into(),
                    ))
                }
            };
            let n = cli::cmd_forecast(&cfg, through)?;
            println!("wrote {n} forecast records through {through}");
        }
        Cmd::Hindcast { from, to } => {
            let r = cli::cmd_hindcast(&cfg, from, to)?;
            println!("wrote {} hindcast records", r.len());
        }
        Cmd::Evaluate { from, to, by } => {
            let extra = by.iter().map(|s| cli::parse_group(s)).collect::<Result<Vec<_>>>()?;
            let rows = cli::cmd_evaluate(&cfg, from, to, &extra)?;
            println!("wrote {} score rows", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = match args.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
