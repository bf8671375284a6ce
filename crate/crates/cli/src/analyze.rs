use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sensi_core::normal::{normal_cdf, normal_sf, two_sided_pvalue};
use sensi_core::randomization::{exact_tail_count, exact_two_sided_pvalue};
use sensi_core::{
    apply_hypothesis, closed_testing_with, deviate, gamma_star, holm_combine, read_design, solve_minimax,
    uniform_moments, worst_case_pvalue, Alternative, Certificate, ColumnSchema, Gamma, GammaChangepoint,
    GammaSearch, HypothesisSpec, MatchedDesign, MinimaxProblem, NullKind, ScoreMatrix, SensiError,
    SolverConfig, StatisticKind,
};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Separate,
    Minimax,
    ClosedTesting,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// CSV file with one row per individual.
    input: PathBuf,
    #[arg(long, default_value = "stratum")]
    stratum_col: String,
    #[arg(long, default_value = "treated")]
    treated_col: String,
    /// Outcome columns, comma separated.
    #[arg(long, value_delimiter = ',', required_unless_present = "replay")]
    outcomes: Vec<String>,
    /// Test statistic: one for all outcomes or one per outcome.
    #[arg(long, value_delimiter = ',', default_value = "aligned-rank")]
    stat: Vec<String>,
    /// two-sided, greater or less: one for all outcomes or one per outcome.
    #[arg(long, value_delimiter = ',', default_value = "two-sided")]
    alt: Vec<String>,
    /// sharp, additive:TAU or multiplicative:BETA: one for all outcomes or
    /// one per outcome.
    #[arg(long, value_delimiter = ',', default_value = "sharp")]
    null: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Explicit Gamma values, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "gamma_grid")]
    gamma: Option<Vec<f64>>,
    /// Gamma grid as lo:hi:step.
    #[arg(long, default_value = "1:2:0.25")]
    gamma_grid: String,
    /// Also locate the changepoint Gamma* of every selected method.
    #[arg(long)]
    gamma_search: bool,
    #[arg(long, default_value_t = 1e-3)]
    search_tol: f64,
    /// First upper probe of the changepoint search.
    #[arg(long, default_value_t = 2.0)]
    search_hi: f64,
    #[arg(long, default_value_t = 1e6)]
    search_cap: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Method::Separate, Method::Minimax, Method::ClosedTesting])]
    method: Vec<Method>,
    /// Largest number of assignments enumerated for exact p-values.
    #[arg(long, default_value_t = 1048576.0)]
    exact_cap: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the decision table as CSV.
    #[arg(long)]
    table_csv: Option<PathBuf>,
    /// Rerun with the configuration embedded in an earlier report; the
    /// input must hash to the recorded SHA-256.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub stratum_col: String,
    pub treated_col: String,
    pub outcomes: Vec<String>,
    pub statistics: Vec<StatisticKind>,
    pub alternatives: Vec<Alternative>,
    pub nulls: Vec<NullKind>,
    pub alpha: f64,
    pub gammas: Vec<f64>,
    pub gamma_search: Option<GammaSearch>,
    pub methods: Vec<Method>,
    pub exact_cap: f64,
    pub solver: SolverConfig,
}

#[derive(Debug, Serialize)]
pub struct InputInfo {
    pub path: String,
    pub sha256: String,
    pub rows: usize,
}

#[derive(Debug, Serialize)]
pub struct DesignSummary {
    pub strata: usize,
    pub members: usize,
    pub outcomes: usize,
    pub pairs_only: bool,
    pub min_stratum_size: usize,
    pub max_stratum_size: usize,
    /// Strata whose treated member was recorded as the only control.
    pub flipped_strata: usize,
    pub log10_assignments: f64,
}

#[derive(Debug, Serialize)]
pub struct UniformInference {
    pub outcome: String,
    pub statistic: String,
    pub alternative: Alternative,
    pub null: NullKind,
    pub t_obs: f64,
    pub mean: f64,
    pub variance: f64,
    pub deviate: f64,
    pub p_value: f64,
    /// Exact randomization p-value when the assignment count is within the
    /// enumeration cap.
    pub exact_p_value: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct SeparateDecision {
    pub p_values: Vec<f64>,
    pub deviates: Vec<f64>,
    pub holm_reject: Vec<bool>,
    /// Smallest p-value at most alpha / K.
    pub bonferroni_overall: bool,
}

#[derive(Debug, Serialize)]
pub struct MinimaxDecision {
    pub value: f64,
    pub reject: bool,
    pub zetas: Vec<f64>,
    pub certificate: Certificate,
    pub gap: f64,
    pub oracle_value: Option<f64>,
    pub newton_steps: usize,
}

#[derive(Debug, Serialize)]
pub struct ClosedDecision {
    pub reject: Vec<bool>,
    /// Outcome names of every rejected intersection.
    pub rejected_intersections: Vec<Vec<String>>,
}

#[derive(Debug, Serialize)]
pub struct DecisionRow {
    pub gamma: f64,
    pub separate: Option<SeparateDecision>,
    pub minimax: Option<MinimaxDecision>,
    pub closed_testing: Option<ClosedDecision>,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub input: InputInfo,
    pub config: AnalysisConfig,
    pub design: DesignSummary,
    pub gamma_one: Vec<UniformInference>,
    pub decisions: Vec<DecisionRow>,
    pub changepoints: Vec<GammaChangepoint>,
}

/// Parses `lo:hi:step` into an inclusive grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Input(format!("gamma grid `{text}` is not lo:hi:step"));
    let parts = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    let [lo, hi, step] = parts[..] else {
        return Err(bad());
    };
    if !(lo >= 1.0 && hi >= lo && step > 0.0 && hi.is_finite()) {
        return Err(CliError::Input(format!(
            "gamma grid `{text}` needs 1 <= lo <= hi and step > 0"
        )));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if count > 10_000 {
        return Err(CliError::Input(format!("gamma grid `{text}` has more than 10000 points")));
    }
    Ok((0..count)
        .map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

fn parse_alternative(s: &str) -> Result<Alternative, CliError> {
    match s.trim() {
        "two-sided" => Ok(Alternative::TwoSided),
        "greater" => Ok(Alternative::Greater),
        "less" => Ok(Alternative::Less),
        other => Err(CliError::Input(format!(
            "unknown alternative `{other}`; use two-sided, greater or less"
        ))),
    }
}

fn parse_null(s: &str) -> Result<NullKind, CliError> {
    let s = s.trim();
    let value = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| CliError::Input(format!("null `{s}` has a malformed value")))
    };
    match s.split_once(':') {
        None if s == "sharp" => Ok(NullKind::Sharp),
        Some(("additive", v)) => Ok(NullKind::Additive(value(v)?)),
        Some(("multiplicative", v)) => Ok(NullKind::Multiplicative(value(v)?)),
        _ => Err(CliError::Input(format!(
            "unknown null `{s}`; use sharp, additive:TAU or multiplicative:BETA"
        ))),
    }
}

/// Broadcasts a single flag value to every outcome.
fn per_outcome<T: Clone>(values: Vec<T>, k: usize, flag: &str) -> Result<Vec<T>, CliError> {
    match values.len() {
        1 => Ok(vec![values[0].clone(); k]),
        n if n == k => Ok(values),
        n => Err(CliError::Input(format!("--{flag} has {n} values for {k} outcomes"))),
    }
}

/// Everything needed to test at one `Gamma`.
struct Analysis {
    design: MatchedDesign,
    scores: ScoreMatrix,
    config: AnalysisConfig,
}

impl Analysis {
    fn k(&self) -> usize {
        self.scores.n_outcomes()
    }

    fn has(&self, m: Method) -> bool {
        self.config.methods.contains(&m)
    }

    fn separate(&self, gamma: Gamma) -> Result<SeparateDecision, SensiError> {
        let worst = (0..self.k())
            .map(|k| {
                worst_case_pvalue(
                    &self.scores,
                    &self.design,
                    k,
                    self.config.alternatives[k],
                    gamma,
                    &self.config.solver,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let p_values: Vec<f64> = worst.iter().map(|w| w.p).collect();
        let holm = holm_combine(&p_values, self.config.alpha);
        Ok(SeparateDecision {
            deviates: worst.iter().map(|w| w.deviate).collect(),
            p_values,
            holm_reject: holm.reject,
            bonferroni_overall: holm.overall,
        })
    }

    fn problem(&self, subset: &[usize], gamma: Gamma) -> Result<MinimaxProblem, SensiError> {
        MinimaxProblem::new(
            &self.design,
            &self.scores,
            subset,
            &self.config.alternatives,
            self.config.alpha,
            gamma,
        )
    }

    fn minimax(&self, gamma: Gamma) -> Result<MinimaxDecision, SensiError> {
        let all: Vec<usize> = (0..self.k()).collect();
        let s = solve_minimax(&self.problem(&all, gamma)?, &self.config.solver)?;
        if s.certificate == Certificate::GridMismatch {
            log::warn!("Gamma = {}: the grid oracle disagrees with the solver", gamma.value());
        }
        Ok(MinimaxDecision {
            value: s.y,
            reject: s.reject,
            zetas: s.zetas,
            certificate: s.certificate,
            gap: s.gap,
            oracle_value: s.oracle_value,
            newton_steps: s.newton_steps,
        })
    }

    /// Singletons are tested with their worst-case p-values at level alpha,
    /// larger intersections with the joint test.
    fn closed(&self, gamma: Gamma, separate: &SeparateDecision) -> Result<ClosedDecision, SensiError> {
        let alpha = self.config.alpha;
        let result = closed_testing_with(self.k(), |h| match h.outcomes[..] {
            [j] => Ok(separate.p_values[j] <= alpha),
            _ => Ok(solve_minimax(&self.problem(&h.outcomes, gamma)?, &self.config.solver)?.reject),
        })?;
        let names = &self.config.outcomes;
        let rejected_intersections = result
            .intersections
            .iter()
            .filter(|h| result.rejected.contains(&h.index))
            .map(|h| h.outcomes.iter().map(|&j| names[j].clone()).collect())
            .collect();
        Ok(ClosedDecision {
            reject: result.reject,
            rejected_intersections,
        })
    }

    fn decide(&self, g: f64) -> Result<DecisionRow, SensiError> {
        let gamma = Gamma::new(g)?;
        let separate = if self.has(Method::Separate) || self.has(Method::ClosedTesting) {
            Some(self.separate(gamma)?)
        } else {
            None
        };
        let minimax = if self.has(Method::Minimax) {
            Some(self.minimax(gamma)?)
        } else {
            None
        };
        let closed_testing = match &separate {
            Some(s) if self.has(Method::ClosedTesting) => Some(self.closed(gamma, s)?),
            _ => None,
        };
        Ok(DecisionRow {
            gamma: g,
            separate: separate.filter(|_| self.has(Method::Separate)),
            minimax,
            closed_testing,
        })
    }

    fn uniform(&self) -> Result<Vec<UniformInference>, SensiError> {
        (0..self.k())
            .map(|k| {
                let col = self.scores.column(k);
                let m = uniform_moments(&self.scores, &self.design, k);
                let d = deviate(col.t_obs, m)?;
                let alternative = self.config.alternatives[k];
                let p_value = match alternative {
                    Alternative::TwoSided => two_sided_pvalue(d),
                    Alternative::Greater => normal_sf(d),
                    Alternative::Less => normal_cdf(d),
                };
                Ok(UniformInference {
                    outcome: self.config.outcomes[k].clone(),
                    statistic: col.kind.name().to_string(),
                    alternative,
                    null: self.config.nulls[k],
                    t_obs: col.t_obs,
                    mean: m.mean,
                    variance: m.variance,
                    deviate: d,
                    p_value,
                    exact_p_value: self.exact(k, alternative)?,
                })
            })
            .collect()
    }

    fn exact(&self, k: usize, alternative: Alternative) -> Result<Option<f64>, SensiError> {
        let col = self.scores.column(k);
        let offsets = self.design.offsets();
        let cap = self.config.exact_cap;
        let result = match alternative {
            Alternative::TwoSided => exact_two_sided_pvalue(&self.scores, &self.design, k, cap),
            Alternative::Greater => {
                exact_tail_count(&col.q, offsets, col.t_obs, cap).map(|(c, n)| c as f64 / n as f64)
            }
            Alternative::Less => {
                let neg: Vec<f64> = col.q.iter().map(|v| -v).collect();
                exact_tail_count(&neg, offsets, -col.t_obs, cap).map(|(c, n)| c as f64 / n as f64)
            }
        };
        match result {
            Ok(p) => Ok(Some(p)),
            Err(SensiError::CapExceeded { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn changepoints(&self, search: &GammaSearch) -> Result<Vec<GammaChangepoint>, SensiError> {
        type Rule<'a> = Box<dyn Fn(Gamma) -> Result<bool, SensiError> + Sync + 'a>;
        let mut rules: Vec<(String, Rule)> = Vec::new();
        let alpha = self.config.alpha;
        let names = &self.config.outcomes;
        if self.has(Method::Separate) {
            rules.push((
                "separate:overall".into(),
                Box::new(|g| Ok(self.separate(g)?.bonferroni_overall)),
            ));
            for k in 0..self.k() {
                rules.push((
                    format!("separate:holm:{}", names[k]),
                    Box::new(move |g| Ok(self.separate(g)?.holm_reject[k])),
                ));
                rules.push((
                    format!("separate:unadjusted:{}", names[k]),
                    Box::new(move |g| Ok(self.separate(g)?.p_values[k] <= alpha)),
                ));
            }
        }
        if self.has(Method::Minimax) {
            rules.push(("minimax:overall".into(), Box::new(|g| Ok(self.minimax(g)?.reject))));
        }
        if self.has(Method::ClosedTesting) {
            for k in 0..self.k() {
                rules.push((
                    format!("closed-testing:{}", names[k]),
                    Box::new(move |g| {
                        let s = self.separate(g)?;
                        Ok(self.closed(g, &s)?.reject[k])
                    }),
                ));
            }
        }
        rules
            .par_iter()
            .map(|(label, rule)| gamma_star(label, rule, search))
            .collect()
    }
}

fn analysis_config(args: &AnalyzeArgs) -> Result<AnalysisConfig, CliError> {
    let k = args.outcomes.len();
    let statistics = per_outcome(args.stat.clone(), k, "stat")?
        .iter()
        .map(|s| s.trim().parse::<StatisticKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let alternatives = per_outcome(args.alt.clone(), k, "alt")?
        .iter()
        .map(|s| parse_alternative(s))
        .collect::<Result<Vec<_>, _>>()?;
    let nulls = per_outcome(args.null.clone(), k, "null")?
        .iter()
        .map(|s| parse_null(s))
        .collect::<Result<Vec<_>, _>>()?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Input(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let gammas = match &args.gamma {
        Some(g) => {
            if g.iter().any(|&x| !(x >= 1.0 && x.is_finite())) {
                return Err(CliError::Input("every --gamma must be a finite value >= 1".into()));
            }
            g.clone()
        }
        None => parse_grid(&args.gamma_grid)?,
    };
    let gamma_search = args.gamma_search.then_some(GammaSearch {
        lo: 1.0,
        hi: args.search_hi,
        tol: args.search_tol,
        cap: args.search_cap,
    });
    let mut methods = args.method.clone();
    methods.sort();
    methods.dedup();
    Ok(AnalysisConfig {
        stratum_col: args.stratum_col.clone(),
        treated_col: args.treated_col.clone(),
        outcomes: args.outcomes.clone(),
        statistics,
        alternatives,
        nulls,
        alpha: args.alpha,
        gammas,
        gamma_search,
        methods,
        exact_cap: args.exact_cap,
        solver: SolverConfig::default(),
    })
}

/// Runs the analysis on CSV bytes already read from `path`.
pub fn analyze_bytes(bytes: &[u8], path: &str, config: AnalysisConfig) -> Result<AnalysisReport, CliError> {
    let schema = ColumnSchema {
        stratum: config.stratum_col.clone(),
        treated: config.treated_col.clone(),
        outcomes: config.outcomes.clone(),
    };
    let design = read_design(bytes, &schema)?;
    let spec = HypothesisSpec {
        nulls: config.nulls.clone(),
        alternatives: config.alternatives.clone(),
    };
    let adjusted = apply_hypothesis(&design, &spec)?;
    let scores = ScoreMatrix::build(&design, &adjusted, &config.statistics)?;
    let sizes = design.stratum_sizes();
    let summary = DesignSummary {
        strata: design.n_strata(),
        members: design.n_total(),
        outcomes: design.n_outcomes(),
        pairs_only: design.all_pairs(),
        min_stratum_size: sizes.iter().copied().min().unwrap_or(0),
        max_stratum_size: sizes.iter().copied().max().unwrap_or(0),
        flipped_strata: design.strata().iter().filter(|s| s.flipped).count(),
        log10_assignments: sizes.iter().map(|&n| (n as f64).log10()).sum(),
    };
    let input = InputInfo {
        path: path.to_string(),
        sha256: hex::encode(Sha256::digest(bytes)),
        rows: design.n_total(),
    };
    let analysis = Analysis { design, scores, config };
    let gamma_one = analysis.uniform()?;
    let decisions = analysis
        .config
        .gammas
        .par_iter()
        .map(|&g| analysis.decide(g))
        .collect::<Result<Vec<_>, _>>()?;
    let changepoints = match &analysis.config.gamma_search {
        Some(search) => analysis.changepoints(search)?,
        None => Vec::new(),
    };
    for c in &changepoints {
        for a in &c.anomalies {
            log::warn!("{}: {a}", c.method);
        }
    }
    Ok(AnalysisReport {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        input,
        config: analysis.config,
        design: summary,
        gamma_one,
        decisions,
        changepoints,
    })
}

/// Flat decision table: `gamma,method,target,reject,value`.
pub fn decision_csv(report: &AnalysisReport) -> String {
    let names = &report.config.outcomes;
    let mut out = String::from("gamma,method,target,reject,value\n");
    for row in &report.decisions {
        let g = row.gamma;
        if let Some(s) = &row.separate {
            let _ = writeln!(out, "{g},separate,overall,{},", s.bonferroni_overall);
            for (k, name) in names.iter().enumerate() {
                let _ = writeln!(out, "{g},separate,{name},{},{}", s.holm_reject[k], s.p_values[k]);
            }
        }
        if let Some(m) = &row.minimax {
            let _ = writeln!(out, "{g},minimax,overall,{},{}", m.reject, m.value);
        }
        if let Some(c) = &row.closed_testing {
            for (k, name) in names.iter().enumerate() {
                let _ = writeln!(out, "{g},closed-testing,{name},{},", c.reject[k]);
            }
        }
    }
    out
}

#[derive(Deserialize)]
struct RecordedInput {
    sha256: String,
}

#[derive(Deserialize)]
struct RecordedReport {
    input: RecordedInput,
    config: AnalysisConfig,
}

pub fn run(args: &AnalyzeArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.input)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", args.input.display())))?;
    let config = match &args.replay {
        None => analysis_config(args)?,
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
            let recorded: RecordedReport = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{} is not an analysis report: {e}", path.display())))?;
            let digest = hex::encode(Sha256::digest(&bytes));
            if digest != recorded.input.sha256 {
                return Err(CliError::Input(format!(
                    "{} hashes to {digest}, the report was made from {}",
                    args.input.display(),
                    recorded.input.sha256
                )));
            }
            recorded.config
        }
    };
    let report = analyze_bytes(&bytes, &args.input.display().to_string(), config)?;
    if let Some(path) = &args.table_csv {
        std::fs::write(path, decision_csv(&report))
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    let text = serde_json::to_string_pretty(&report).expect("json") + "\n";
    crate::emit(&text, args.out.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_inclusive() {
        assert_eq!(parse_grid("1:2:0.25").unwrap(), vec![1.0, 1.25, 1.5, 1.75, 2.0]);
        assert_eq!(parse_grid("1.5:1.5:1").unwrap(), vec![1.5]);
        assert_eq!(parse_grid("1:1.3:0.1").unwrap(), vec![1.0, 1.1, 1.2, 1.3]);
    }

    #[test]
    fn grid_rejects_bad_input() {
        for bad in ["1:2", "0.5:2:0.1", "2:1:0.1", "1:2:0", "a:b:c", "1:1e9:1e-3"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn nulls_and_alternatives_parse() {
        assert_eq!(parse_null("sharp").unwrap(), NullKind::Sharp);
        assert_eq!(parse_null("additive:0.5").unwrap(), NullKind::Additive(0.5));
        assert_eq!(parse_null("multiplicative:2").unwrap(), NullKind::Multiplicative(2.0));
        assert!(parse_null("additive").is_err());
        assert_eq!(parse_alternative("less").unwrap(), Alternative::Less);
    }

    #[test]
    fn single_values_broadcast() {
        assert_eq!(per_outcome(vec![1], 3, "x").unwrap(), vec![1, 1, 1]);
        assert!(per_outcome(vec![1, 2], 3, "x").is_err());
    }
}
