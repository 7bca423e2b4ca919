//! `tasc` — command-line front end for time-aware synthetic control.
//!
//! Exit codes: 0 success, 1 parse/configuration/IO failure, 2 numerical
//! failure. Outputs are written only when the whole command succeeds.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tasc_core::{MethodKind, TascError};

use config::{Format, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "tasc", version, about = "Time-aware synthetic control and baselines")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one estimator and write the post-intervention counterfactual.
    Infer(Flags),
    /// Draw a synthetic panel and write values, signal and true parameters.
    Simulate(Flags),
    /// Placebo fits for every donor plus threshold-filtered unit lists.
    Placebo(Flags),
    /// Ordered versus column-shuffled post RMSE.
    Permute(Flags),
    /// Regime × method × replicate sweep on simulated panels.
    Bench(Flags),
}

#[derive(Args, Debug, Clone)]
struct Flags {
    /// JSON run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Input panel CSV (rows = units, columns = time).
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Output file (a directory for `simulate`).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Estimator; `bench` accepts a comma-separated list.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    method: Vec<MethodKind>,
    /// Latent dimension (TASC) and singular values kept (RSC).
    #[arg(long)]
    d: Option<usize>,
    /// Maximum EM iterations.
    #[arg(long)]
    n1: Option<usize>,
    /// Fixed RSC ridge coefficient (disables the validation grid).
    #[arg(long)]
    lambda: Option<f64>,
    /// Placebo threshold ratio; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    ratio: Vec<f64>,
    /// Horizon buckets for per-horizon RMSE.
    #[arg(long)]
    buckets: Option<usize>,
    /// Number of random column shuffles.
    #[arg(long)]
    shuffles: Option<usize>,
    /// Use identity orderings only (permute).
    #[arg(long)]
    identity: bool,
    /// Replicates per regime (bench).
    #[arg(long)]
    replicates: Option<usize>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Number of pre-intervention columns of the input panel.
    #[arg(long)]
    t0: Option<usize>,
    /// Data row holding the treated unit (0-based, header excluded).
    #[arg(long)]
    target_row: Option<usize>,
    /// The input has no header row and no label column.
    #[arg(long)]
    no_header: bool,
    /// JSON metadata sidecar `{n_units, t_total, t0, target_label}`.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<MethodKind, String> {
    s.parse().map_err(|e: TascError| e.to_string())
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            input: self.input.clone(),
            output: self.output.clone(),
            format: self.format,
            seed: self.seed,
            t0: self.t0,
            target_row: self.target_row,
            no_header: self.no_header,
            sidecar: self.sidecar.clone(),
            method: self.method.clone(),
            d: self.d,
            n1: self.n1,
            lambda: self.lambda,
            ratio: self.ratio.clone(),
            buckets: self.buckets,
            shuffles: self.shuffles,
            replicates: self.replicates,
            identity: self.identity,
        }
    }
}

fn run(command: Command, invocation: String) -> tasc_core::Result<()> {
    let (flags, which) = match &command {
        Command::Infer(f) => (f, "infer"),
        Command::Simulate(f) => (f, "simulate"),
        Command::Placebo(f) => (f, "placebo"),
        Command::Permute(f) => (f, "permute"),
        Command::Bench(f) => (f, "bench"),
    };
    if which != "bench" && flags.method.len() > 1 {
        return Err(TascError::Config(format!("{which} takes exactly one --method")));
    }
    let mut cfg = RunConfig::load(flags.config.as_deref())?;
    cfg.apply(flags.overrides())?;
    let prov = output::Provenance::new(invocation, cfg.seed);
    let artifacts = match command {
        Command::Infer(_) => commands::infer(&cfg, &prov)?,
        Command::Simulate(_) => commands::simulate(&cfg, &prov)?,
        Command::Placebo(_) => commands::placebo(&cfg, &prov)?,
        Command::Permute(_) => commands::permute(&cfg, &prov)?,
        Command::Bench(_) => commands::bench(&cfg, &prov)?,
    };
    output::write_all(&artifacts)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    // the program path is left out so outputs do not depend on where the
    // binary lives
    let invocation = std::iter::once("tasc".to_string()).chain(std::env::args().skip(1)).collect::<Vec<_>>().join(" ");
    match run(cli.command, invocation) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
