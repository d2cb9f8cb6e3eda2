//! `funcreserve`: functional loss-reserving pipeline from the command line.
//!
//! Every subcommand reads one JSON run configuration, writes its artifacts
//! into the configured output directory and finishes with `manifest.json`.
//! Exit codes: 0 success, 1 data or validation failure, 2 usage error,
//! 3 numerical failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use funcreserve::{Error, ErrorClass, Result};

use config::LoadedConfig;
use output::Outputs;

#[derive(Parser)]
#[command(name = "funcreserve", version, about = "Functional data analysis of loss-development triangles")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest the triangles and report invariant violations.
    Validate(RunArgs),
    /// Per-lag summary statistics of the complete curves.
    Summarize(RunArgs),
    /// Depth ranking, flagged outliers and covariate-stratified envelopes.
    Outliers(RunArgs),
    /// Tune and fit the FPCA basis and regression priors for one `s`.
    Fit(RunArgs),
    /// Complete one partial curve with bootstrap regions.
    Forecast(RunArgs),
    /// Fixed-origin backtest over s = 1..9.
    Backtest(RunArgs),
    /// Sequential completion of the lower triangle.
    Complete(RunArgs),
    /// Score forecast bands and ensembles against developed truth.
    Score(RunArgs),
    /// Draw a synthetic data set.
    Synth(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(short, long)]
    config: PathBuf,
}

impl Command {
    fn parts(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Validate(a) => ("validate", a),
            Command::Summarize(a) => ("summarize", a),
            Command::Outliers(a) => ("outliers", a),
            Command::Fit(a) => ("fit", a),
            Command::Forecast(a) => ("forecast", a),
            Command::Backtest(a) => ("backtest", a),
            Command::Complete(a) => ("complete", a),
            Command::Score(a) => ("score", a),
            Command::Synth(a) => ("synth", a),
        }
    }
}

fn run(command: &Command) -> Result<()> {
    let (name, args) = command.parts();
    let loaded = LoadedConfig::load(&args.config)?;
    let cfg = &loaded.config;
    let mut out = Outputs::create(&cfg.output)?;
    out.write_bytes("config.json", &loaded.raw)?;
    let mut failure = None;
    match name {
        "validate" => {
            let violations = commands::validate(cfg, &mut out)?;
            if !violations.is_empty() {
                failure = Some(Error::Validation(format!(
                    "{} invariant violations, see validation.json",
                    violations.len()
                )));
            }
        }
        "summarize" => commands::summarize_cmd(cfg, &mut out)?,
        "outliers" => commands::outliers(cfg, &mut out)?,
        "fit" => commands::fit(cfg, &mut out)?,
        "forecast" => commands::forecast(cfg, &mut out)?,
        "backtest" => commands::backtest(cfg, &mut out)?,
        "complete" => commands::complete(cfg, &mut out)?,
        "score" => commands::score(cfg, &mut out)?,
        "synth" => commands::synth(cfg, &mut out)?,
        _ => unreachable!("clap only yields known subcommands"),
    }
    out.finish(name, cfg.pipeline.seed, &loaded.raw)?;
    failure.map_or(Ok(()), Err)
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Data => 1,
        ErrorClass::Usage => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line: `error[<class>]: <message>`
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {message}", e.tag());
            ExitCode::from(exit_code(&e))
        }
    }
}
