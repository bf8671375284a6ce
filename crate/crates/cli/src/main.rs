mod analyze;
mod check;
mod error;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sensi", version, about = "Sensitivity analysis for matched studies with several outcomes")]
struct Cli {
    /// Worker threads; 0 uses every logical core.
    #[arg(long, global = true, env = "SENSI_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Analyze a matched dataset and emit a JSON report.
    Analyze(analyze::AnalyzeArgs),
    /// Run a Monte Carlo power study.
    Simulate(simulate::SimulateArgs),
    /// Compare the solver with the brute-force oracle on small instances.
    OracleCheck(check::CheckArgs),
    /// Treatment probabilities implied by a confounder inside one stratum.
    Implied(ImpliedArgs),
}

#[derive(Debug, Args)]
struct ImpliedArgs {
    /// Confounder values, comma separated, each in [0, 1].
    #[arg(long, value_delimiter = ',', required = true)]
    u: Vec<f64>,
    #[arg(long)]
    gamma: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Input(format!("cannot start thread pool: {e}")))?;
    match cli.command {
        Command::Analyze(args) => analyze::run(&args),
        Command::Simulate(args) => simulate::run(&args),
        Command::OracleCheck(args) => check::run(&args),
        Command::Implied(args) => implied(&args),
    }
}

fn implied(args: &ImpliedArgs) -> Result<(), CliError> {
    if args.u.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(CliError::Input("confounder values must lie in [0, 1]".into()));
    }
    let gamma = sensi_core::Gamma::new(args.gamma)?;
    let p = sensi_core::implied_probability(&args.u, gamma);
    let out = serde_json::json!({ "gamma": args.gamma, "u": args.u, "probabilities": p });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub(crate) fn emit(text: &str, path: Option<&PathBuf>) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
