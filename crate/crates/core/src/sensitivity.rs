//! Single-outcome sensitivity analysis at a fixed `Gamma`.

use serde::{Deserialize, Serialize};

use crate::design::{Alternative, Gamma, MatchedDesign};
use crate::error::{Result, SensiError};
use crate::ipm::{self, Piece, Program};
use crate::minimax::{solve_minimax, MinimaxProblem, MinimaxSolution, SolverConfig};
use crate::normal::{chi2_1_sf, normal_sf};
use crate::randomization::moments;
use crate::stats::ScoreMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// Binary confounder that marks the `cut` members with the most extreme
/// scores in the requested direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub cut: usize,
    pub mean: f64,
    pub variance: f64,
    /// Within-stratum confounder, in stored member order.
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseBound {
    pub gamma: f64,
    pub direction: Direction,
    pub mean: f64,
    pub variance: f64,
    pub deviate: f64,
    /// Selected confounder over all `N` members.
    pub u: Vec<f64>,
}

/// Candidates `c = 1..n-1`: the top `c` members (in `direction`) get
/// `u = 1` and probability `Gamma / (c Gamma + n - c)`, the rest
/// `1 / (c Gamma + n - c)`.
pub fn stratum_candidates(q: &[f64], gamma: Gamma, direction: Direction) -> Vec<Candidate> {
    let n = q.len();
    let g = gamma.value();
    let mut order: Vec<usize> = (0..n).collect();
    match direction {
        Direction::Maximize => order.sort_by(|&a, &b| q[b].total_cmp(&q[a])),
        Direction::Minimize => order.sort_by(|&a, &b| q[a].total_cmp(&q[b])),
    }
    let total: f64 = q.iter().sum();
    let total2: f64 = q.iter().map(|x| x * x).sum();
    let mut top = 0.0;
    let mut top2 = 0.0;
    let mut u = vec![0.0; n];
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for (c, &j) in order.iter().enumerate().take(n - 1) {
        top += q[j];
        top2 += q[j] * q[j];
        u[j] = 1.0;
        let c = (c + 1) as f64;
        let denom = c * g + (n as f64 - c);
        let mean = (g * top + (total - top)) / denom;
        let m2 = (g * top2 + (total2 - top2)) / denom;
        out.push(Candidate {
            cut: c as usize,
            mean,
            variance: (m2 - mean * mean).max(0.0),
            u: u.clone(),
        });
    }
    out
}

fn pick(cands: &[Candidate], direction: Direction) -> &Candidate {
    let mut best = &cands[0];
    for c in &cands[1..] {
        let (a, b) = match direction {
            Direction::Maximize => (c.mean, best.mean),
            Direction::Minimize => (-c.mean, -best.mean),
        };
        let tol = 1e-12 * a.abs().max(b.abs()).max(1e-300);
        if a > b + tol || ((a - b).abs() <= tol && c.variance > best.variance) {
            best = c;
        }
    }
    best
}

/// Per-stratum extreme-mean selection, ties resolved toward the larger
/// variance, summed over strata.
pub fn separable_worst_case(
    scores: &ScoreMatrix,
    design: &MatchedDesign,
    k: usize,
    gamma: Gamma,
    direction: Direction,
) -> Result<WorstCaseBound> {
    let col = scores.column(k);
    let mut mean = 0.0;
    let mut variance = 0.0;
    let mut u = Vec::with_capacity(design.n_total());
    for w in design.offsets().windows(2) {
        let q = &col.q[w[0]..w[1]];
        let cands = stratum_candidates(q, gamma, direction);
        let c = pick(&cands, direction);
        mean += c.mean;
        variance += c.variance;
        if gamma.is_one() {
            u.extend(std::iter::repeat_n(0.0, q.len()));
        } else {
            u.extend_from_slice(&c.u);
        }
    }
    if !(variance > 0.0) {
        return Err(SensiError::DegenerateStatistic);
    }
    Ok(WorstCaseBound {
        gamma: gamma.value(),
        direction,
        mean,
        variance,
        deviate: (col.t_obs - mean) / variance.sqrt(),
        u,
    })
}

/// Runs both directions; when `t` lies between the extreme means the worst
/// case is a zero deviate, otherwise the smaller squared deviate wins.
pub fn separable_two_sided(
    scores: &ScoreMatrix,
    design: &MatchedDesign,
    k: usize,
    gamma: Gamma,
) -> Result<WorstCaseBound> {
    let hi = separable_worst_case(scores, design, k, gamma, Direction::Maximize)?;
    let lo = separable_worst_case(scores, design, k, gamma, Direction::Minimize)?;
    let t = scores.column(k).t_obs;
    if t <= hi.mean && t >= lo.mean {
        let mut b = if hi.deviate.abs() <= lo.deviate.abs() { hi } else { lo };
        b.deviate = 0.0;
        return Ok(b);
    }
    Ok(if hi.deviate.abs() <= lo.deviate.abs() { hi } else { lo })
}

/// Minimizes `zeta_k` over the feasible set at local level `alpha_local`.
pub fn single_outcome_qp(
    scores: &ScoreMatrix,
    design: &MatchedDesign,
    k: usize,
    alternative: Alternative,
    gamma: Gamma,
    alpha_local: f64,
    config: &SolverConfig,
) -> Result<MinimaxSolution> {
    let mut alts = vec![Alternative::TwoSided; scores.n_outcomes()];
    alts[k] = alternative;
    let problem = MinimaxProblem::new(design, scores, &[k], &alts, alpha_local, gamma)?;
    solve_minimax(&problem, config)
}

/// Largest p-value over the sensitivity model at `Gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCasePValue {
    pub p: f64,
    /// Smallest squared deviate over the feasible set (two-sided), or the
    /// signed worst-case deviate for one-sided alternatives.
    pub deviate: f64,
    /// Whether the value came from the separable approximation.
    pub separable: bool,
}

/// Smallest `(t - mu)^2 / V` over the feasible set, by Dinkelbach iteration
/// on `min (t - mu)^2 - lambda V`, each step a convex program.
pub fn min_squared_deviate(
    q: &[f64],
    t: f64,
    offsets: &[usize],
    gamma: Gamma,
    start: Option<&[f64]>,
    config: &SolverConfig,
) -> Result<f64> {
    let ratio = |rho: &[f64]| -> Result<f64> {
        let m = moments(q, offsets, rho);
        if !(m.variance > 0.0) {
            return Err(SensiError::DegenerateStatistic);
        }
        Ok((t - m.mean).powi(2) / m.variance)
    };
    let uniform = ipm::uniform_rho(offsets);
    let mut lambda = ratio(&uniform)?;
    if let Some(rho) = start {
        lambda = lambda.min(ratio(rho)?);
    }
    if gamma.is_one() || lambda == 0.0 {
        return Ok(lambda);
    }
    let opts = config.engine();
    for _ in 0..60 {
        let program = Program {
            offsets,
            gamma: gamma.value(),
            objective: vec![Piece::zeta(q, t, lambda)],
            constraints: vec![],
        };
        let r = ipm::minimize_max(&program, None, &opts)?;
        let next = ratio(&r.rho)?;
        if next >= lambda * (1.0 - 1e-11) || r.value >= 0.0 {
            return Ok(lambda.min(next));
        }
        lambda = next;
    }
    Ok(lambda)
}

/// Worst-case p-value of outcome `k` at `Gamma`.
///
/// Two-sided: `P(chi^2_1 >= D^2)` with `D^2` the smallest squared deviate.
/// One-sided: exact whenever the statistic lies beyond every attainable
/// mean in the direction of the alternative; otherwise the p-value is at
/// least one half and the separable bound is reported.
pub fn worst_case_pvalue(
    scores: &ScoreMatrix,
    design: &MatchedDesign,
    k: usize,
    alternative: Alternative,
    gamma: Gamma,
    config: &SolverConfig,
) -> Result<WorstCasePValue> {
    let col = scores.column(k);
    let offsets = design.offsets();
    match alternative {
        Alternative::TwoSided => {
            let sep = separable_two_sided(scores, design, k, gamma)?;
            if sep.deviate == 0.0 {
                return Ok(WorstCasePValue {
                    p: 1.0,
                    deviate: 0.0,
                    separable: false,
                });
            }
            let sep_rho = crate::minimax::AssignmentProbabilities::from_confounder(offsets, &sep.u, gamma);
            let d2 = min_squared_deviate(&col.q, col.t_obs, offsets, gamma, Some(&sep_rho.rho), config)?;
            Ok(WorstCasePValue {
                p: chi2_1_sf(d2),
                deviate: d2,
                separable: false,
            })
        }
        Alternative::Greater | Alternative::Less => {
            let direction = if alternative == Alternative::Greater {
                Direction::Maximize
            } else {
                Direction::Minimize
            };
            let sep = separable_worst_case(scores, design, k, gamma, direction)?;
            let sign = if alternative == Alternative::Greater { 1.0 } else { -1.0 };
            if sign * (col.t_obs - sep.mean) > 0.0 {
                let d2 = min_squared_deviate(&col.q, col.t_obs, offsets, gamma, None, config)?;
                Ok(WorstCasePValue {
                    p: normal_sf(d2.sqrt()),
                    deviate: d2.sqrt(),
                    separable: false,
                })
            } else {
                let d = sign * sep.deviate;
                Ok(WorstCasePValue {
                    p: normal_sf(d),
                    deviate: d,
                    separable: true,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{Member, Stratum};
    use crate::stats::{ScoreColumn, StatisticKind};

    fn fixture(blocks: &[Vec<f64>], t: f64) -> (MatchedDesign, ScoreMatrix) {
        let strata = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| Stratum {
                id: i.to_string(),
                members: (0..b.len())
                    .map(|j| Member {
                        treated: j == 0,
                        outcomes: vec![0.0],
                    })
                    .collect(),
                flipped: false,
            })
            .collect();
        let d = MatchedDesign::new(strata, vec!["y".into()]).unwrap();
        let q: Vec<f64> = blocks.iter().flatten().copied().collect();
        let col = ScoreColumn {
            kind: StatisticKind::MeanDifference,
            q,
            t_obs: t,
        };
        (d, ScoreMatrix { columns: vec![col] })
    }

    #[test]
    fn candidate_examples() {
        let g2 = Gamma::new(2.0).unwrap();
        let c = stratum_candidates(&[1.0, 0.0], g2, Direction::Maximize);
        assert_eq!(c.len(), 1);
        assert!((c[0].mean - 2.0 / 3.0).abs() < 1e-15);
        assert!((c[0].variance - 2.0 / 9.0).abs() < 1e-15);
        let c = stratum_candidates(&[1.0, 0.0], Gamma::ONE, Direction::Minimize);
        assert!(c.iter().all(|c| c.mean == 0.5));
        let c = stratum_candidates(&[3.0, 1.0, 2.0], Gamma::new(3.0).unwrap(), Direction::Maximize);
        assert!((c[1].mean - 16.0 / 7.0).abs() < 1e-14);
        assert_eq!(c[1].u, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn separable_single_pair() {
        let (d, s) = fixture(&[vec![1.0, 0.0]], 1.0);
        let b = separable_worst_case(&s, &d, 0, Gamma::new(2.0).unwrap(), Direction::Maximize).unwrap();
        assert!((b.deviate - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn qp_at_gamma_one_is_closed_form() {
        let (d, s) = fixture(&[vec![1.0, 0.0]], 1.0);
        let sol = single_outcome_qp(&s, &d, 0, Alternative::TwoSided, Gamma::ONE, 0.05, &SolverConfig::default())
            .unwrap();
        assert!((sol.y + 0.7104).abs() < 1e-4);
        assert!(!sol.reject);
    }

    #[test]
    fn pvalue_matches_closed_form_for_pairs() {
        // Identical pairs q = [1, 0], t = I: the worst case pushes every pair
        // to rho_1 = Gamma / (1 + Gamma).
        let blocks = vec![vec![1.0, 0.0]; 30];
        let (d, s) = fixture(&blocks, 22.0);
        let g = Gamma::new(1.5).unwrap();
        let p = worst_case_pvalue(&s, &d, 0, Alternative::TwoSided, g, &SolverConfig::default()).unwrap();
        let pr = 1.5 / 2.5;
        let mean = 30.0 * pr;
        let var = 30.0 * pr * (1.0 - pr);
        let d2 = (22.0f64 - mean).powi(2) / var;
        assert!((p.deviate - d2).abs() < 1e-8 * d2, "{} vs {d2}", p.deviate);
        let one = worst_case_pvalue(&s, &d, 0, Alternative::Greater, g, &SolverConfig::default()).unwrap();
        assert!((one.p - normal_sf(d2.sqrt())).abs() < 1e-10);
    }
}
