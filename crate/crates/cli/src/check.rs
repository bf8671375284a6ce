use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use sensi_core::oracle::{self, grid_minimax, opposed_instance, random_instance, single_term};
use sensi_core::{solve_minimax, Gamma, MinimaxProblem, SolverConfig};

use crate::error::CliError;

const OPPOSED_GAMMAS: [f64; 4] = [1.5, 2.0, 5.0, 10.0];
const OPPOSED_SEEDS: u64 = 3;

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Largest number of members per instance (at most 8).
    #[arg(long, default_value_t = 8)]
    n_max: usize,
    /// Largest number of outcomes per instance (at most 3).
    #[arg(long, default_value_t = 3)]
    k_max: usize,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted |solver - oracle|.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 21)]
    resolution: usize,
    #[arg(long, default_value_t = 3)]
    refine: usize,
    /// Skip the constructed opposed-outcome family.
    #[arg(long)]
    no_opposed: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct InstanceCheck {
    family: &'static str,
    seed: u64,
    n: usize,
    outcomes: usize,
    gamma: f64,
    solver: f64,
    oracle: f64,
    gap: f64,
    /// Largest single-outcome optimum; the joint value never falls below it.
    single_max: f64,
    strict_improvement: bool,
    fractional: bool,
}

#[derive(Debug, Serialize)]
struct CheckSummary {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    n_max: usize,
    k_max: usize,
    tol: f64,
    checked: usize,
    worst_gap: f64,
    failures: usize,
    strict_improvements: usize,
    pass: bool,
    instances: Vec<InstanceCheck>,
}

fn check_one(
    family: &'static str,
    seed: u64,
    problem: &MinimaxProblem,
    args: &CheckArgs,
) -> Result<InstanceCheck, CliError> {
    let config = SolverConfig::uncertified();
    let solved = solve_minimax(problem, &config)?;
    let grid = grid_minimax(problem, args.resolution, args.refine)?;
    let single_max = (0..problem.outcomes.len())
        .map(|k| solve_minimax(&single_term(problem, k), &config).map(|s| s.y))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = 1.0 + solved.y.abs();
    Ok(InstanceCheck {
        family,
        seed,
        n: problem.n_total(),
        outcomes: problem.outcomes.len(),
        gamma: problem.gamma.value(),
        solver: solved.y,
        oracle: grid.value,
        gap: (solved.y - grid.value).abs(),
        single_max,
        strict_improvement: solved.y > single_max + 1e-6 * scale,
        fractional: grid.argmin_u.iter().any(|&u| u > 1e-3 && u < 1.0 - 1e-3),
    })
}

pub fn run(args: &CheckArgs) -> Result<(), CliError> {
    if args.n_max < 2 || args.n_max > oracle::GRID_MAX_N {
        return Err(CliError::Input(format!("--n-max must lie in [2, {}]", oracle::GRID_MAX_N)));
    }
    if args.k_max == 0 || args.k_max > oracle::GRID_MAX_OUTCOMES {
        return Err(CliError::Input(format!("--k-max must lie in [1, {}]", oracle::GRID_MAX_OUTCOMES)));
    }
    if !(args.tol > 0.0) {
        return Err(CliError::Input("--tol must be positive".into()));
    }
    let mut jobs: Vec<(&'static str, u64, MinimaxProblem)> = Vec::new();
    if args.instances == 0 {
        log::warn!("no instances requested; the check passes vacuously");
    } else {
        for i in 0..args.instances as u64 {
            let seed = args.seed.wrapping_add(i);
            jobs.push(("random", seed, random_instance(seed, args.n_max, args.k_max)?));
        }
        if !args.no_opposed && args.n_max >= 8 && args.k_max >= 2 {
            for &g in &OPPOSED_GAMMAS {
                for j in 0..OPPOSED_SEEDS {
                    let seed = args.seed.wrapping_add(j);
                    jobs.push(("opposed", seed, opposed_instance(seed, Gamma::new(g)?)));
                }
            }
        }
    }
    let instances = jobs
        .par_iter()
        .map(|(family, seed, p)| check_one(family, *seed, p, args))
        .collect::<Result<Vec<_>, _>>()?;
    let failures = instances.iter().filter(|c| !(c.gap <= args.tol)).count();
    let summary = CheckSummary {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: args.seed,
        n_max: args.n_max,
        k_max: args.k_max,
        tol: args.tol,
        checked: instances.len(),
        worst_gap: instances.iter().map(|c| c.gap).fold(0.0, f64::max),
        failures,
        strict_improvements: instances.iter().filter(|c| c.strict_improvement).count(),
        pass: failures == 0,
        instances,
    };
    let text = serde_json::to_string_pretty(&summary).expect("json") + "\n";
    crate::emit(&text, args.out.as_ref())?;
    if failures > 0 {
        return Err(CliError::Check(format!(
            "{failures} of {} instances exceed the gap tolerance {:e} (worst {:.3e})",
            summary.checked, args.tol, summary.worst_gap
        )));
    }
    Ok(())
}
