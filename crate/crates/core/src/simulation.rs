//! Monte Carlo power and familywise error studies for matched pairs with
//! multivariate normal treated-minus-control differences.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{Alternative, Gamma, MatchedDesign, Member, Stratum};
use crate::error::{Result, SensiError};
use crate::ipm::cholesky;
use crate::minimax::{minimax_rejects, MinimaxProblem, SolverConfig};
use crate::multiplicity::{closed_testing_with, holm_combine};
use crate::sensitivity::worst_case_pvalue;
use crate::stats::{score_column, ScoreMatrix, StatisticKind, DEFAULT_HUBER_TRUNCATION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    pub name: String,
    pub pairs: usize,
    pub tau: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub gammas: Vec<f64>,
    pub alpha: f64,
    pub truncation: f64,
    pub reps: usize,
    pub seed: u64,
    /// Also run closed testing with joint tests for every intersection.
    pub closed_testing: bool,
}

pub const TABLE1_TAUS: [[f64; 5]; 4] = [
    [0.25, 0.25, 0.25, 0.25, 0.25],
    [0.25, 0.25, 0.25, 0.25, 0.0],
    [0.3, 0.3, 0.0, 0.0, 0.0],
    [0.3, 0.0, 0.0, 0.0, 0.0],
];

pub const TABLE2_TAUS: [[f64; 3]; 4] = [
    [0.2, 0.225, 0.25],
    [0.25, 0.3, 0.35],
    [0.2, 0.25, 0.35],
    [0.15, 0.25, 0.35],
];

pub fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn equicorrelated(k: usize, r: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { r }).collect())
        .collect()
}

impl SimulationScenario {
    fn base(name: &str, tau: Vec<f64>, sigma_kind: usize, gammas: Vec<f64>, closed: bool) -> Self {
        let k = tau.len();
        Self {
            name: name.to_string(),
            pairs: 250,
            sigma: if sigma_kind == 1 {
                identity(k)
            } else {
                equicorrelated(k, 0.5)
            },
            tau,
            gammas,
            alpha: 0.05,
            truncation: DEFAULT_HUBER_TRUNCATION,
            reps: 1000,
            seed: 7,
            closed_testing: closed,
        }
    }

    /// Named presets: `table1-t{1..4}-s{1,2}` (five outcomes, overall null),
    /// `table2-t{1..4}-s{1,2}` (three outcomes, closed testing) and
    /// `appc-s{1,2}` (two true nulls out of three).
    pub fn preset(name: &str) -> Option<Self> {
        let parts: Vec<&str> = name.split('-').collect();
        let sigma = |s: &str| match s {
            "s1" => Some(1),
            "s2" => Some(2),
            _ => None,
        };
        let tau_index = |t: &str| match t {
            "t1" => Some(0),
            "t2" => Some(1),
            "t3" => Some(2),
            "t4" => Some(3),
            _ => None,
        };
        match parts.as_slice() {
            ["table1", t, s] => Some(Self::base(
                name,
                TABLE1_TAUS[tau_index(t)?].to_vec(),
                sigma(s)?,
                vec![1.25, 1.5, 1.75],
                false,
            )),
            ["table2", t, s] => Some(Self::base(
                name,
                TABLE2_TAUS[tau_index(t)?].to_vec(),
                sigma(s)?,
                vec![1.25, 1.375, 1.5],
                true,
            )),
            ["appc", s] => Some(Self::base(
                name,
                vec![0.0, 0.0, 0.3],
                sigma(s)?,
                vec![1.0, 1.05, 1.1],
                true,
            )),
            _ => None,
        }
    }

    pub fn preset_names() -> Vec<String> {
        let mut out = Vec::new();
        for table in ["table1", "table2"] {
            for t in 1..=4 {
                for s in 1..=2 {
                    out.push(format!("{table}-t{t}-s{s}"));
                }
            }
        }
        out.push("appc-s1".into());
        out.push("appc-s2".into());
        out
    }

    /// Parses the `key = value` scenario format. Lines starting with `#` are
    /// comments. Keys: `name`, `pairs`, `tau` (comma list), `sigma`
    /// (`identity`, `equicorrelated(r)` or rows `a,b;c,d`), `gammas`,
    /// `alpha`, `truncation`, `reps`, `seed`, `closed_testing`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SensiError::invalid(format!("scenario line {}: expected `key = value`", n + 1))
            })?;
            map.insert(key.trim().to_string(), (n + 1, value.trim().to_string()));
        }
        let bad = |key: &str, line: usize, what: &str| {
            SensiError::invalid(format!("scenario line {line}: `{key}` {what}"))
        };
        let list = |key: &str, line: usize, v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| bad(key, line, "is not a number list")))
                .collect()
        };
        let (tau_line, tau_raw) = map
            .get("tau")
            .cloned()
            .ok_or_else(|| SensiError::invalid("scenario needs `tau`"))?;
        let tau = list("tau", tau_line, &tau_raw)?;
        let k = tau.len();
        let mut s = Self::base("custom", tau, 1, vec![1.0], false);
        for (key, (line, value)) in &map {
            let line = *line;
            match key.as_str() {
                "tau" => {}
                "name" => s.name = value.clone(),
                "pairs" => s.pairs = value.parse().map_err(|_| bad(key, line, "is not an integer"))?,
                "reps" => s.reps = value.parse().map_err(|_| bad(key, line, "is not an integer"))?,
                "seed" => s.seed = value.parse().map_err(|_| bad(key, line, "is not an integer"))?,
                "alpha" => s.alpha = value.parse().map_err(|_| bad(key, line, "is not a number"))?,
                "truncation" => {
                    s.truncation = value.parse().map_err(|_| bad(key, line, "is not a number"))?
                }
                "gammas" => s.gammas = list(key, line, value)?,
                "closed_testing" => {
                    s.closed_testing = value.parse().map_err(|_| bad(key, line, "is not true/false"))?
                }
                "sigma" => s.sigma = parse_sigma(value, k).ok_or_else(|| bad(key, line, "is malformed"))?,
                _ => return Err(bad(key, line, "is not a known key")),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.tau.len();
        if k == 0 || self.pairs < 2 || self.reps == 0 {
            return Err(SensiError::invalid("scenario needs outcomes, at least 2 pairs and 1 replicate"));
        }
        if self.sigma.len() != k || self.sigma.iter().any(|r| r.len() != k) {
            return Err(SensiError::invalid("sigma must be K x K"));
        }
        for i in 0..k {
            for j in 0..k {
                if (self.sigma[i][j] - self.sigma[j][i]).abs() > 1e-12 {
                    return Err(SensiError::invalid("sigma must be symmetric"));
                }
            }
        }
        self.cholesky()?;
        if self.gammas.is_empty() {
            return Err(SensiError::invalid("scenario needs at least one Gamma"));
        }
        for &g in &self.gammas {
            Gamma::new(g)?;
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SensiError::invalid("alpha must lie in (0, 1)"));
        }
        Ok(())
    }

    fn cholesky(&self) -> Result<Vec<f64>> {
        let k = self.tau.len();
        let flat: Vec<f64> = self.sigma.iter().flatten().copied().collect();
        cholesky(&flat, k).ok_or(SensiError::NotPositiveDefinite)
    }

    pub fn n_outcomes(&self) -> usize {
        self.tau.len()
    }
}

fn parse_sigma(value: &str, k: usize) -> Option<Vec<Vec<f64>>> {
    let v = value.trim();
    if v == "identity" {
        return Some(identity(k));
    }
    if let Some(inner) = v.strip_prefix("equicorrelated(").and_then(|r| r.strip_suffix(')')) {
        return Some(equicorrelated(k, inner.trim().parse().ok()?));
    }
    v.split(';')
        .map(|row| row.split(',').map(|x| x.trim().parse::<f64>().ok()).collect())
        .collect()
}

/// `I x K` differences for replicate `rep`: `tau + L z` with `L L' = Sigma`,
/// drawn from stream `rep` of a ChaCha20 generator keyed by the seed.
pub fn generate_paired_differences(scenario: &SimulationScenario, rep: u64) -> Result<Vec<Vec<f64>>> {
    let l = scenario.cholesky()?;
    let k = scenario.n_outcomes();
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
    rng.set_stream(rep);
    let mut out = Vec::with_capacity(scenario.pairs);
    let mut z = vec![0.0; k];
    for _ in 0..scenario.pairs {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let row = (0..k)
            .map(|i| scenario.tau[i] + (0..=i).map(|j| l[i * k + j] * z[j]).sum::<f64>())
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// Pairs with the treated member carrying `D_i` and the control zero.
pub fn pair_design(diffs: &[Vec<f64>]) -> Result<MatchedDesign> {
    let k = diffs.first().map_or(0, Vec::len);
    let strata = diffs
        .iter()
        .enumerate()
        .map(|(i, d)| Stratum {
            id: (i + 1).to_string(),
            members: vec![
                Member {
                    treated: true,
                    outcomes: d.clone(),
                },
                Member {
                    treated: false,
                    outcomes: vec![0.0; k],
                },
            ],
            flipped: false,
        })
        .collect();
    MatchedDesign::new(strata, (1..=k).map(|j| format!("y{j}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    pub se: f64,
}

impl Rate {
    fn from_counts(hits: usize, n: usize) -> Self {
        let p = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        Self {
            rate: p,
            se: if n == 0 { 0.0 } else { (p * (1.0 - p) / n as f64).sqrt() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub gamma: f64,
    pub method: String,
    /// Rejection rate of the overall null.
    pub overall: Rate,
    /// Per-outcome rejection rates; empty for the overall-only method.
    pub outcomes: Vec<Rate>,
    /// Probability of rejecting any true null, when some nulls are true.
    pub fwer: Option<Rate>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DominanceViolations {
    /// Replicates where Bonferroni rejected the overall null and the joint
    /// test did not.
    pub bonferroni_over_minimax: usize,
    /// Replicate-outcome pairs rejected by Holm but not by closed testing.
    pub holm_over_closed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub scenario: SimulationScenario,
    pub completed: usize,
    pub failures: usize,
    /// Standard errors are not informative (fewer than two replicates).
    pub se_degenerate: bool,
    pub rows: Vec<PowerRow>,
    pub violations: DominanceViolations,
}

impl PowerReport {
    pub fn row(&self, gamma: f64, method: &str) -> Option<&PowerRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && (r.gamma - gamma).abs() < 1e-12)
    }

    /// Flat table: `gamma,method,target,rate,se`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,method,target,rate,se\n");
        for r in &self.rows {
            let mut line = |target: &str, rate: &Rate| {
                let _ = writeln!(out, "{},{},{},{:.6},{:.6}", r.gamma, r.method, target, rate.rate, rate.se);
            };
            line("overall", &r.overall);
            for (k, rate) in r.outcomes.iter().enumerate() {
                line(&format!("H{}", k + 1), rate);
            }
            if let Some(f) = &r.fwer {
                line("fwer", f);
            }
        }
        out
    }
}

/// Decisions of one replicate at one `Gamma`.
#[derive(Debug, Clone, PartialEq, Eq)]
struct GammaOutcome {
    bonferroni: bool,
    holm: Vec<bool>,
    minimax: bool,
    closed: Option<Vec<bool>>,
    separate_fwer: bool,
    closed_fwer: bool,
}

fn run_replicate(scenario: &SimulationScenario, rep: u64, config: &SolverConfig) -> Result<Vec<GammaOutcome>> {
    let diffs = generate_paired_differences(scenario, rep)?;
    let design = pair_design(&diffs)?;
    let k = scenario.n_outcomes();
    let kind = StatisticKind::HuberM {
        truncation: scenario.truncation,
    };
    let columns = (0..k)
        .map(|j| score_column(&design, &design.outcome_column(j), kind))
        .collect::<Result<Vec<_>>>()?;
    let scores = ScoreMatrix { columns };
    let alts = vec![Alternative::TwoSided; k];
    let true_nulls: Vec<usize> = (0..k).filter(|&j| scenario.tau[j] == 0.0).collect();
    let all: Vec<usize> = (0..k).collect();

    scenario
        .gammas
        .iter()
        .map(|&g| {
            let gamma = Gamma::new(g)?;
            let pvalues = (0..k)
                .map(|j| worst_case_pvalue(&scores, &design, j, Alternative::TwoSided, gamma, config).map(|p| p.p))
                .collect::<Result<Vec<f64>>>()?;
            let holm = holm_combine(&pvalues, scenario.alpha);
            let joint = MinimaxProblem::new(&design, &scores, &all, &alts, scenario.alpha, gamma)?;
            let minimax = minimax_rejects(&joint, config)?;
            let closed = if scenario.closed_testing {
                let result = closed_testing_with(k, |h| {
                    if h.outcomes.len() == k {
                        return Ok(minimax);
                    }
                    if let [j] = h.outcomes[..] {
                        return Ok(pvalues[j] <= scenario.alpha);
                    }
                    let p = MinimaxProblem::new(&design, &scores, &h.outcomes, &alts, scenario.alpha, gamma)?;
                    minimax_rejects(&p, config)
                })?;
                let fwer = !true_nulls.is_empty() && result.rejects_intersection(&true_nulls);
                Some((result.reject, fwer))
            } else {
                None
            };
            Ok(GammaOutcome {
                bonferroni: holm.overall,
                separate_fwer: true_nulls.iter().any(|&j| holm.reject[j]),
                holm: holm.reject,
                minimax,
                closed_fwer: closed.as_ref().is_some_and(|c| c.1),
                closed: closed.map(|c| c.0),
            })
        })
        .collect()
}

/// Runs every replicate and aggregates rejection frequencies. Replicates
/// that fail are dropped when they are under 1% of the total; otherwise the
/// study aborts.
pub fn run_power_study(scenario: &SimulationScenario, config: &SolverConfig) -> Result<PowerReport> {
    scenario.validate()?;
    info!("simulating {} ({} replicates)", scenario.name, scenario.reps);
    let results: Vec<Result<Vec<GammaOutcome>>> = (0..scenario.reps as u64)
        .into_par_iter()
        .map(|rep| run_replicate(scenario, rep, config))
        .collect();
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = 0;
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                warn!("replicate {rep} failed: {e}");
                failures += 1;
            }
        }
    }
    if failures > 0 && failures as f64 >= 0.01 * scenario.reps as f64 {
        return Err(SensiError::TooManyFailures {
            failed: failures,
            total: scenario.reps,
        });
    }
    let n = ok.len();
    let k = scenario.n_outcomes();
    let has_true_nulls = scenario.tau.contains(&0.0);
    let mut rows = Vec::new();
    let mut violations = DominanceViolations::default();
    for (gi, &g) in scenario.gammas.iter().enumerate() {
        let at: Vec<&GammaOutcome> = ok.iter().map(|v| &v[gi]).collect();
        let count = |f: &dyn Fn(&GammaOutcome) -> bool| Rate::from_counts(at.iter().filter(|o| f(o)).count(), n);
        violations.bonferroni_over_minimax += at.iter().filter(|o| o.bonferroni && !o.minimax).count();
        rows.push(PowerRow {
            gamma: g,
            method: "separate".into(),
            overall: count(&|o| o.bonferroni),
            outcomes: (0..k).map(|j| count(&|o| o.holm[j])).collect(),
            fwer: has_true_nulls.then(|| count(&|o| o.separate_fwer)),
        });
        rows.push(PowerRow {
            gamma: g,
            method: "minimax".into(),
            overall: count(&|o| o.minimax),
            outcomes: Vec::new(),
            fwer: None,
        });
        if scenario.closed_testing {
            for o in &at {
                let closed = o.closed.as_ref().unwrap();
                violations.holm_over_closed += (0..k).filter(|&j| o.holm[j] && !closed[j]).count();
            }
            rows.push(PowerRow {
                gamma: g,
                method: "closed-testing".into(),
                overall: count(&|o| o.minimax),
                outcomes: (0..k)
                    .map(|j| count(&|o| o.closed.as_ref().unwrap()[j]))
                    .collect(),
                fwer: has_true_nulls.then(|| count(&|o| o.closed_fwer)),
            });
        }
    }
    Ok(PowerReport {
        scenario: scenario.clone(),
        completed: n,
        failures,
        se_degenerate: n < 2,
        rows,
        violations,
    })
}
