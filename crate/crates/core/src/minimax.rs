//! The joint sensitivity problem: find the assignment probabilities, common to
//! every outcome in a set, that minimize the largest rejection functional
//!
//! ```text
//! zeta_k(rho) = (t_k - mu_k(rho))^2 - c_k V_k(rho)
//! ```
//!
//! The intersection null is rejected at `Gamma` iff the optimum `y*` is
//! nonnegative: no single confounder can make every outcome look
//! insignificant at once.
//!
//! Every `zeta_k` is convex in `rho` (a convex square minus a concave
//! variance), so the program is convex and is solved to global optimality by
//! the interior-point engine in [`crate::ipm`]. One-sided outcomes switch off when
//! their statistic lies on the wrong side of its mean; the feasible set is
//! split into the polyhedral regions defined by those sign conditions and
//! each region is solved separately.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::design::{Alternative, Gamma, MatchedDesign};
use crate::error::{Result, SensiError};
use crate::ipm::{self, EngineOptions, Piece, Program, Stop};
use crate::normal::normal_quantile;
use crate::oracle;
use crate::randomization::moments;
use crate::stats::ScoreMatrix;

/// Value of a one-sided functional whose outcome cannot reject at `rho`.
pub const NEG_SENTINEL: f64 = -1e30;

/// Treatment probabilities `rho_ij` together with the Charnes-Cooper scalars
/// `s_i` that certify `s_i <= rho_ij <= Gamma s_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentProbabilities {
    pub gamma: f64,
    pub offsets: Vec<usize>,
    pub rho: Vec<f64>,
    pub s: Vec<f64>,
}

impl AssignmentProbabilities {
    pub fn uniform(offsets: &[usize]) -> Self {
        let rho = ipm::uniform_rho(offsets);
        let s = offsets.windows(2).map(|w| 1.0 / (w[1] - w[0]) as f64).collect();
        Self {
            gamma: 1.0,
            offsets: offsets.to_vec(),
            rho,
            s,
        }
    }

    /// `rho_ij = exp(gamma u_ij) / sum_j' exp(gamma u_ij')`.
    pub fn from_confounder(offsets: &[usize], u: &[f64], gamma: Gamma) -> Self {
        let g = gamma.log();
        let mut rho = vec![0.0; u.len()];
        let mut s = Vec::with_capacity(offsets.len() - 1);
        for w in offsets.windows(2) {
            let block = &u[w[0]..w[1]];
            let top = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = block.iter().map(|&v| (g * (v - top)).exp()).sum();
            for (r, &v) in rho[w[0]..w[1]].iter_mut().zip(block) {
                *r = (g * (v - top)).exp() / total;
            }
            s.push(rho[w[0]..w[1]].iter().copied().fold(f64::INFINITY, f64::min));
        }
        Self {
            gamma: gamma.value(),
            offsets: offsets.to_vec(),
            rho,
            s,
        }
    }

    /// Recovers a confounder in `[0, 1]^N`, zero at each stratum's least
    /// likely member, that reproduces `rho` under the model map.
    pub fn confounder(&self) -> Vec<f64> {
        let g = self.gamma.ln();
        let mut u = vec![0.0; self.rho.len()];
        if g <= 0.0 {
            return u;
        }
        for w in self.offsets.windows(2) {
            let block = &self.rho[w[0]..w[1]];
            let lo = block.iter().copied().fold(f64::INFINITY, f64::min);
            for (x, &r) in u[w[0]..w[1]].iter_mut().zip(block) {
                *x = ((r / lo).ln() / g).clamp(0.0, 1.0);
            }
        }
        u
    }

    /// Simplex sums within `tol` and `max rho <= Gamma min rho (1 + tol)`.
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.offsets.windows(2).all(|w| {
            let block = &self.rho[w[0]..w[1]];
            let total: f64 = block.iter().sum();
            let lo = block.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = block.iter().copied().fold(0.0, f64::max);
            (total - 1.0).abs() <= tol && lo >= 0.0 && hi <= self.gamma * lo * (1.0 + tol)
        })
    }
}

/// Softmax of `gamma u`: the treatment probabilities that a confounder
/// implies inside one stratum.
pub fn implied_probability(u: &[f64], gamma: Gamma) -> Vec<f64> {
    AssignmentProbabilities::from_confounder(&[0, u.len()], u, gamma).rho
}

/// One outcome inside a joint problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTerm {
    /// Outcome index in the design.
    pub index: usize,
    pub q: Vec<f64>,
    pub t_obs: f64,
    pub alternative: Alternative,
    /// Multiplier `c_k` of the variance.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxProblem {
    pub offsets: Vec<usize>,
    pub outcomes: Vec<OutcomeTerm>,
    pub gamma: Gamma,
    pub alpha: f64,
}

/// Critical value of a squared deviate when `size` outcomes share level
/// `alpha` equally.
pub fn threshold(alternative: Alternative, alpha: f64, size: usize) -> f64 {
    let level = alpha / size as f64;
    let z = match alternative {
        Alternative::TwoSided => normal_quantile(1.0 - level / 2.0),
        _ => normal_quantile(1.0 - level),
    };
    z * z
}

impl MinimaxProblem {
    /// Joint problem for the outcomes in `subset` at overall level `alpha`.
    /// `alternatives` has one entry per design outcome.
    pub fn new(
        design: &MatchedDesign,
        scores: &ScoreMatrix,
        subset: &[usize],
        alternatives: &[Alternative],
        alpha: f64,
        gamma: Gamma,
    ) -> Result<Self> {
        if subset.is_empty() {
            return Err(SensiError::invalid("empty outcome subset"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(SensiError::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if alternatives.len() != scores.n_outcomes() {
            return Err(SensiError::invalid("one alternative per outcome is required"));
        }
        let outcomes = subset
            .iter()
            .map(|&k| {
                let col = scores
                    .columns
                    .get(k)
                    .ok_or_else(|| SensiError::invalid(format!("no outcome {k}")))?;
                Ok(OutcomeTerm {
                    index: k,
                    q: col.q.clone(),
                    t_obs: col.t_obs,
                    alternative: alternatives[k],
                    threshold: threshold(alternatives[k], alpha, subset.len()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            offsets: design.offsets().to_vec(),
            outcomes,
            gamma,
            alpha,
        })
    }

    /// Builds a problem from raw score vectors, every outcome sharing
    /// `alternative`.
    pub fn from_parts(
        offsets: Vec<usize>,
        columns: Vec<(Vec<f64>, f64)>,
        alternative: Alternative,
        alpha: f64,
        gamma: Gamma,
    ) -> Self {
        let size = columns.len();
        let outcomes = columns
            .into_iter()
            .enumerate()
            .map(|(k, (q, t_obs))| OutcomeTerm {
                index: k,
                q,
                t_obs,
                alternative,
                threshold: threshold(alternative, alpha, size),
            })
            .collect();
        Self {
            offsets,
            outcomes,
            gamma,
            alpha,
        }
    }

    pub fn with_gamma(&self, gamma: Gamma) -> Self {
        Self {
            gamma,
            ..self.clone()
        }
    }

    pub fn n_total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }
}

/// `(t_k - mu_k)^2 - c_k V_k` at `rho`, for the `k`-th term of the problem.
pub fn zeta(problem: &MinimaxProblem, k: usize, rho: &[f64]) -> f64 {
    let o = &problem.outcomes[k];
    let m = moments(&o.q, &problem.offsets, rho);
    let d = o.t_obs - m.mean;
    d * d - o.threshold * m.variance
}

/// Direction-aware functional: [`NEG_SENTINEL`] when the statistic lies on
/// the wrong side of its mean for a one-sided alternative, otherwise
/// [`zeta`]. A statistic equal to its mean counts as the right side.
pub fn zeta_one_sided(problem: &MinimaxProblem, k: usize, rho: &[f64]) -> f64 {
    let o = &problem.outcomes[k];
    let m = moments(&o.q, &problem.offsets, rho);
    let d = o.t_obs - m.mean;
    let wrong_side = match o.alternative {
        Alternative::TwoSided => false,
        Alternative::Greater => d < 0.0,
        Alternative::Less => d > 0.0,
    };
    if wrong_side {
        NEG_SENTINEL
    } else {
        d * d - o.threshold * m.variance
    }
}

/// `max_k` of the direction-aware functionals.
pub fn objective(problem: &MinimaxProblem, rho: &[f64]) -> f64 {
    (0..problem.outcomes.len())
        .map(|k| zeta_one_sided(problem, k, rho))
        .fold(NEG_SENTINEL, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Certificate {
    /// `Gamma = 1`: the feasible set is a single point.
    Singleton,
    /// Certified duality gap below tolerance and the grid oracle agrees.
    CertifiedByGrid,
    /// Certified duality gap below tolerance; no grid run.
    DualityGap,
    /// The grid oracle found a better point than the solver.
    GridMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Certified stopping gap, relative to the objective scale.
    pub gap_tol: f64,
    pub max_iterations: usize,
    /// Largest `N` for which the grid oracle double-checks a solve.
    pub certify_max_n: usize,
    pub certify_max_outcomes: usize,
    pub grid_resolution: usize,
    pub grid_refine: usize,
    pub certify_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gap_tol: 1e-9,
            max_iterations: 300,
            certify_max_n: 8,
            certify_max_outcomes: 3,
            grid_resolution: 21,
            grid_refine: 3,
            certify_tol: 1e-4,
        }
    }
}

impl SolverConfig {
    /// Same engine settings, never running the grid oracle.
    pub fn uncertified() -> Self {
        Self {
            certify_max_n: 0,
            ..Self::default()
        }
    }

    pub(crate) fn engine(&self) -> EngineOptions {
        EngineOptions {
            gap_tol: self.gap_tol,
            max_iterations: self.max_iterations,
            ..EngineOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxSolution {
    pub y: f64,
    pub rho: AssignmentProbabilities,
    pub u: Vec<f64>,
    /// Direction-aware functional of every outcome at the optimum.
    pub zetas: Vec<f64>,
    pub certificate: Certificate,
    pub reject: bool,
    /// Upper bound on `y - y_opt` from the certified duality gap.
    pub gap: f64,
    pub oracle_value: Option<f64>,
    pub newton_steps: usize,
}

struct Core {
    y: f64,
    rho: Vec<f64>,
    s: Vec<f64>,
    gap: f64,
    steps: usize,
}

/// Solves the joint problem to global optimality.
pub fn solve_minimax(problem: &MinimaxProblem, config: &SolverConfig) -> Result<MinimaxSolution> {
    validate(problem)?;
    let core = solve_core(problem, config, false)?;
    let gamma = problem.gamma.value();
    let rho = AssignmentProbabilities {
        gamma,
        offsets: problem.offsets.clone(),
        rho: core.rho,
        s: core.s,
    };
    let zetas: Vec<f64> = (0..problem.outcomes.len())
        .map(|k| zeta_one_sided(problem, k, &rho.rho))
        .collect();
    let mut certificate = if problem.gamma.is_one() {
        Certificate::Singleton
    } else {
        Certificate::DualityGap
    };
    let mut oracle_value = None;
    if !problem.gamma.is_one()
        && problem.n_total() <= config.certify_max_n
        && problem.outcomes.len() <= config.certify_max_outcomes
    {
        let grid = oracle::grid_minimax(problem, config.grid_resolution, config.grid_refine)?;
        oracle_value = Some(grid.value);
        if grid.value < core.y - config.certify_tol {
            warn!(
                "grid oracle value {:.6e} is below the solver value {:.6e}",
                grid.value, core.y
            );
            certificate = Certificate::GridMismatch;
        } else {
            certificate = Certificate::CertifiedByGrid;
        }
    }
    Ok(MinimaxSolution {
        y: core.y,
        u: rho.confounder(),
        rho,
        zetas,
        certificate,
        reject: core.y >= 0.0,
        gap: core.gap,
        oracle_value,
        newton_steps: core.steps,
    })
}

/// Decision only: whether `y* >= 0`. Stops as soon as the sign is certain.
pub fn minimax_rejects(problem: &MinimaxProblem, config: &SolverConfig) -> Result<bool> {
    validate(problem)?;
    Ok(solve_core(problem, config, true)?.y >= 0.0)
}

fn validate(problem: &MinimaxProblem) -> Result<()> {
    if problem.outcomes.is_empty() {
        return Err(SensiError::invalid("minimax problem has no outcomes"));
    }
    let n = problem.n_total();
    if problem.outcomes.iter().any(|o| o.q.len() != n) {
        return Err(SensiError::invalid("score length does not match the design"));
    }
    Ok(())
}

fn solve_core(problem: &MinimaxProblem, config: &SolverConfig, sign_only: bool) -> Result<Core> {
    let offsets = &problem.offsets;
    if problem.gamma.is_one() {
        let rho = ipm::uniform_rho(offsets);
        let s = offsets.windows(2).map(|w| 1.0 / (w[1] - w[0]) as f64).collect();
        return Ok(Core {
            y: objective(problem, &rho),
            rho,
            s,
            gap: 0.0,
            steps: 0,
        });
    }
    let gamma = problem.gamma.value();
    let mut opts = config.engine();
    opts.sign_only = sign_only;

    let one_sided: Vec<usize> = (0..problem.outcomes.len())
        .filter(|&k| !problem.outcomes[k].alternative.is_two_sided())
        .collect();
    if one_sided.len() > 20 {
        return Err(SensiError::invalid("too many one-sided outcomes"));
    }

    let mut best: Option<Core> = None;
    let mut steps = 0;
    // Bit `b` of `pattern` set: one-sided outcome `one_sided[b]` is on the
    // wrong side of its mean and drops out of the maximum.
    let patterns = 1usize << one_sided.len();
    for pattern in (0..patterns).rev() {
        let mut constraints = Vec::new();
        let mut active = vec![true; problem.outcomes.len()];
        for (b, &k) in one_sided.iter().enumerate() {
            let o = &problem.outcomes[k];
            let off = pattern >> b & 1 == 1;
            active[k] = !off;
            let up = o.alternative == Alternative::Greater;
            // right side for `greater` means mu <= t
            let sign = if up != off { 1.0 } else { -1.0 };
            constraints.push(Piece::linear(&o.q, o.t_obs, sign));
        }
        let objective_pieces: Vec<Piece> = problem
            .outcomes
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(o, _)| Piece::zeta(&o.q, o.t_obs, o.threshold))
            .collect();

        let start = if constraints.is_empty() {
            None
        } else {
            match find_interior(offsets, gamma, &constraints, config)? {
                Some((rho, n)) => {
                    steps += n;
                    Some(rho)
                }
                None => continue,
            }
        };
        if objective_pieces.is_empty() {
            // Every outcome can be placed on its wrong side at once.
            let rho = start.unwrap_or_else(|| ipm::uniform_rho(offsets));
            let s = s_for(offsets, &rho, gamma);
            return Ok(Core {
                y: NEG_SENTINEL,
                rho,
                s,
                gap: 0.0,
                steps,
            });
        }
        let program = Program {
            offsets,
            gamma,
            objective: objective_pieces,
            constraints,
        };
        let r = ipm::minimize_max(&program, start.as_deref(), &opts)?;
        steps += r.newton_steps;
        let y = objective(problem, &r.rho);
        let candidate = Core {
            y,
            gap: (r.value - r.lower_bound).max(0.0),
            rho: r.rho,
            s: r.s,
            steps: 0,
        };
        if sign_only && r.stop == Stop::SignDecided && y < 0.0 {
            return Ok(Core { steps, ..candidate });
        }
        if best.as_ref().is_none_or(|b| candidate.y < b.y) {
            best = Some(candidate);
        }
    }
    let best = best.ok_or_else(|| {
        SensiError::invalid("no sign region of the one-sided outcomes has an interior point")
    })?;
    Ok(Core { steps, ..best })
}

fn s_for(offsets: &[usize], rho: &[f64], gamma: f64) -> Vec<f64> {
    offsets
        .windows(2)
        .map(|w| {
            let hi = rho[w[0]..w[1]].iter().copied().fold(0.0, f64::max);
            hi / gamma
        })
        .collect()
}

/// Strictly feasible point for the linear constraint pieces, if one exists.
fn find_interior(
    offsets: &[usize],
    gamma: f64,
    constraints: &[Piece<'_>],
    config: &SolverConfig,
) -> Result<Option<(Vec<f64>, usize)>> {
    let uniform = ipm::uniform_rho(offsets);
    if constraints.iter().all(|c| c.value(offsets, &uniform) < 0.0) {
        return Ok(Some((uniform, 0)));
    }
    let mut scale: f64 = 0.0;
    for c in constraints {
        let (mu, v) = c.moments(offsets, &uniform);
        scale = scale.max((c.t - mu).abs() + v.sqrt());
    }
    let target = -1e-9 * scale.max(f64::MIN_POSITIVE);
    let program = Program {
        offsets,
        gamma,
        objective: constraints.to_vec(),
        constraints: vec![],
    };
    let mut opts = config.engine();
    opts.stop_below = Some(target);
    let r = ipm::minimize_max(&program, None, &opts)?;
    if r.value < target {
        Ok(Some((r.rho, r.newton_steps)))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_problem(gamma: f64, alt: Alternative) -> MinimaxProblem {
        MinimaxProblem::from_parts(
            vec![0, 2],
            vec![(vec![1.0, 0.0], 1.0)],
            alt,
            0.05,
            Gamma::new(gamma).unwrap(),
        )
    }

    #[test]
    fn zeta_examples() {
        let p = pair_problem(1.0, Alternative::TwoSided);
        assert!((p.outcomes[0].threshold - 3.841_459).abs() < 1e-6);
        let z = zeta(&p, 0, &[0.5, 0.5]);
        assert!((z - (0.25 - 3.841_458_820_694_124 * 0.25)).abs() < 1e-12);
        assert!((z + 0.7104).abs() < 1e-4);
        assert_eq!(zeta(&p, 0, &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn one_sided_sentinel_and_boundary() {
        let p = MinimaxProblem::from_parts(
            vec![0, 2],
            vec![(vec![1.0, 0.0], 0.2)],
            Alternative::Greater,
            0.05,
            Gamma::ONE,
        );
        assert_eq!(zeta_one_sided(&p, 0, &[0.5, 0.5]), NEG_SENTINEL);
        let z1 = normal_quantile(0.95);
        assert!((p.outcomes[0].threshold - z1 * z1).abs() < 1e-12);
        let p = MinimaxProblem::from_parts(
            vec![0, 2],
            vec![(vec![1.0, 0.0], 0.5)],
            Alternative::Greater,
            0.05,
            Gamma::ONE,
        );
        let z = zeta_one_sided(&p, 0, &[0.5, 0.5]);
        assert!((z + p.outcomes[0].threshold * 0.25).abs() < 1e-15);
    }

    #[test]
    fn gamma_one_is_the_uniform_value() {
        let p = pair_problem(1.0, Alternative::TwoSided);
        let s = solve_minimax(&p, &SolverConfig::default()).unwrap();
        assert_eq!(s.certificate, Certificate::Singleton);
        assert_eq!(s.y, zeta(&p, 0, &[0.5, 0.5]));
        assert!(!s.reject);
    }

    #[test]
    fn single_pair_at_gamma_two() {
        let p = pair_problem(2.0, Alternative::TwoSided);
        let s = solve_minimax(&p, &SolverConfig::default()).unwrap();
        let c = p.outcomes[0].threshold;
        let pr = (2.0 + c) / (2.0 + 2.0 * c);
        let expect = (1.0 - pr).powi(2) - c * pr * (1.0 - pr);
        assert!((s.y - expect).abs() < 1e-8, "{} vs {expect}", s.y);
        assert!(s.rho.is_feasible(1e-9));
        assert_eq!(s.certificate, Certificate::CertifiedByGrid);
        let back = AssignmentProbabilities::from_confounder(&[0, 2], &s.u, Gamma::new(2.0).unwrap());
        assert!((back.rho[0] - s.rho.rho[0]).abs() < 1e-9);
    }

    #[test]
    fn one_sided_wrong_side_never_rejects() {
        let p = MinimaxProblem::from_parts(
            vec![0, 2, 4],
            vec![(vec![1.0, 0.0, 1.0, 0.0], 0.0)],
            Alternative::Greater,
            0.05,
            Gamma::new(3.0).unwrap(),
        );
        let s = solve_minimax(&p, &SolverConfig::uncertified()).unwrap();
        assert_eq!(s.y, NEG_SENTINEL);
        assert!(!s.reject);
    }

    #[test]
    fn implied_probability_examples() {
        let g10 = Gamma::new(10.0).unwrap();
        let p = implied_probability(&[0.953, 0.391], g10);
        assert!((p[1] - 0.215).abs() < 0.005, "{p:?}");
        let p = implied_probability(&[1.0, 0.0], g10);
        assert!((p[0] - 10.0 / 11.0).abs() < 1e-15 && (p[1] - 1.0 / 11.0).abs() < 1e-15);
        let p = implied_probability(&[0.3, 0.3], g10);
        assert_eq!(p, vec![0.5, 0.5]);
    }
}
