use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;
use sensi_core::{run_power_study, PowerReport, SimulationScenario, SolverConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Named scenario, e.g. table1-t2-s1, table2-t1-s1 or appc-s1.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    preset: Option<String>,
    /// Scenario file in `key = value` form.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario's Gamma values.
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SimulationOutput<'a> {
    tool: &'static str,
    version: &'static str,
    #[serde(flatten)]
    report: &'a PowerReport,
}

fn scenario_from(args: &SimulateArgs) -> Result<SimulationScenario, CliError> {
    let mut scenario = match (&args.preset, &args.scenario) {
        (Some(name), _) => SimulationScenario::preset(name).ok_or_else(|| {
            CliError::Input(format!(
                "unknown preset `{name}`; known: {}",
                SimulationScenario::preset_names().join(", ")
            ))
        })?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
            SimulationScenario::parse(&text)?
        }
        (None, None) => return Err(CliError::Input("either --preset or --scenario is required".into())),
    };
    if let Some(r) = args.reps {
        scenario.reps = r;
    }
    if let Some(s) = args.seed {
        scenario.seed = s;
    }
    if let Some(g) = &args.gammas {
        scenario.gammas = g.clone();
    }
    scenario.validate()?;
    Ok(scenario)
}

pub fn run(args: &SimulateArgs) -> Result<(), CliError> {
    let scenario = scenario_from(args)?;
    let report = run_power_study(&scenario, &SolverConfig::uncertified())?;
    if report.se_degenerate {
        log::warn!("fewer than two replicates completed; standard errors are not informative");
    }
    let text = match args.format {
        Format::Csv => report.to_csv(),
        Format::Json => {
            let out = SimulationOutput {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                report: &report,
            };
            serde_json::to_string_pretty(&out).expect("json") + "\n"
        }
    };
    crate::emit(&text, args.out.as_ref())
}
