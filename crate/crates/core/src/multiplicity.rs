//! Multiple outcomes: Holm's step-down on separate worst-case p-values,
//! sequential rejection over intersection nulls, closed testing with the
//! joint minimax test, and the search for the `Gamma` at which a conclusion
//! is overturned.

use std::collections::BTreeSet;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{Alternative, Gamma, MatchedDesign};
use crate::error::{Result, SensiError};
use crate::minimax::{minimax_rejects, MinimaxProblem, SolverConfig};
use crate::stats::ScoreMatrix;

pub const MAX_CLOSED_OUTCOMES: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntersectionNull {
    pub index: usize,
    /// Outcome indices, sorted.
    pub outcomes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionState {
    pub step: usize,
    /// Indices of the rejected intersection nulls.
    pub rejected: BTreeSet<usize>,
}

/// Rule deciding which nulls may be tested once `rejected` is known. The
/// successor set is the eligible nulls whose test rejects.
pub trait SuccessorRule {
    fn eligible(&self, nulls: &[IntersectionNull], rejected: &BTreeSet<usize>) -> Vec<usize>;
}

/// Closed testing: a null becomes testable once every null whose outcome set
/// strictly contains its own has been rejected.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClosedTestingRule;

impl SuccessorRule for ClosedTestingRule {
    fn eligible(&self, nulls: &[IntersectionNull], rejected: &BTreeSet<usize>) -> Vec<usize> {
        nulls
            .iter()
            .filter(|h| !rejected.contains(&h.index))
            .filter(|h| {
                nulls
                    .iter()
                    .filter(|g| g.outcomes.len() > h.outcomes.len() && is_subset(&h.outcomes, &g.outcomes))
                    .all(|g| rejected.contains(&g.index))
            })
            .map(|h| h.index)
            .collect()
    }
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.contains(x))
}

/// A failed test inside [`sequential_rejection`], with the states reached
/// before it.
#[derive(Debug)]
pub struct PartialTrace {
    pub error: SensiError,
    pub trace: Vec<RejectionState>,
}

impl std::fmt::Display for PartialTrace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} steps)", self.error, self.trace.len())
    }
}

/// Iterates `R_{a+1} = R_a + N(R_a)` until nothing changes. Eligible nulls
/// of one step are tested concurrently; a null whose test failed is not
/// tested again.
pub fn sequential_rejection<T, S>(
    nulls: &[IntersectionNull],
    tester: T,
    rule: &S,
) -> std::result::Result<Vec<RejectionState>, PartialTrace>
where
    T: Fn(&IntersectionNull) -> Result<bool> + Sync,
    S: SuccessorRule + ?Sized,
{
    let mut rejected = BTreeSet::new();
    let mut failed = BTreeSet::new();
    let mut trace = vec![RejectionState {
        step: 0,
        rejected: rejected.clone(),
    }];
    for step in 1..=nulls.len() + 1 {
        let todo: Vec<usize> = rule
            .eligible(nulls, &rejected)
            .into_iter()
            .filter(|i| !failed.contains(i))
            .collect();
        let results: Vec<(usize, Result<bool>)> = todo
            .par_iter()
            .map(|&i| (i, tester(&nulls[i])))
            .collect();
        let mut grew = false;
        for (i, r) in results {
            match r {
                Ok(true) => {
                    rejected.insert(i);
                    grew = true;
                }
                Ok(false) => {
                    failed.insert(i);
                }
                Err(error) => return Err(PartialTrace { error, trace }),
            }
        }
        if !grew {
            break;
        }
        trace.push(RejectionState {
            step,
            rejected: rejected.clone(),
        });
    }
    Ok(trace)
}

/// All nonempty subsets of `0..k`, largest first.
pub fn all_intersections(k: usize) -> Result<Vec<IntersectionNull>> {
    if k == 0 {
        return Err(SensiError::invalid("no outcomes"));
    }
    if k > MAX_CLOSED_OUTCOMES {
        return Err(SensiError::CapExceeded {
            size: ((1u64 << k) - 1) as f64,
            cap: ((1u64 << MAX_CLOSED_OUTCOMES) - 1) as f64,
        });
    }
    let mut masks: Vec<u32> = (1..(1u32 << k)).collect();
    masks.sort_by_key(|m| (std::cmp::Reverse(m.count_ones()), *m));
    Ok(masks
        .into_iter()
        .enumerate()
        .map(|(index, m)| IntersectionNull {
            index,
            outcomes: (0..k).filter(|&j| m >> j & 1 == 1).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedTestingResult {
    pub reject: Vec<bool>,
    pub intersections: Vec<IntersectionNull>,
    /// Final rejection set, as indices into `intersections`.
    pub rejected: BTreeSet<usize>,
    pub trace: Vec<RejectionState>,
}

impl ClosedTestingResult {
    /// Whether the intersection null of exactly `outcomes` was rejected.
    pub fn rejects_intersection(&self, outcomes: &[usize]) -> bool {
        let mut sorted = outcomes.to_vec();
        sorted.sort_unstable();
        self.intersections
            .iter()
            .find(|h| h.outcomes == sorted)
            .is_some_and(|h| self.rejected.contains(&h.index))
    }
}

/// Closure of the per-outcome nulls under intersection, each intersection
/// tested by the joint minimax problem at local level `alpha`.
pub fn closed_testing(
    design: &MatchedDesign,
    scores: &ScoreMatrix,
    alternatives: &[Alternative],
    gamma: Gamma,
    alpha: f64,
    config: &SolverConfig,
) -> Result<ClosedTestingResult> {
    closed_testing_with(scores.n_outcomes(), |h| {
        let problem = MinimaxProblem::new(design, scores, &h.outcomes, alternatives, alpha, gamma)?;
        minimax_rejects(&problem, config)
    })
}

/// Closed testing with a caller-supplied intersection test.
pub fn closed_testing_with<T>(k: usize, tester: T) -> Result<ClosedTestingResult>
where
    T: Fn(&IntersectionNull) -> Result<bool> + Sync,
{
    let intersections = all_intersections(k)?;
    let trace = sequential_rejection(&intersections, tester, &ClosedTestingRule).map_err(|p| p.error)?;
    let rejected = trace.last().map(|s| s.rejected.clone()).unwrap_or_default();
    let reject = (0..k)
        .map(|j| {
            intersections
                .iter()
                .any(|h| h.outcomes == [j] && rejected.contains(&h.index))
        })
        .collect();
    Ok(ClosedTestingResult {
        reject,
        intersections,
        rejected,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HolmResult {
    pub reject: Vec<bool>,
    /// Bonferroni test of the overall null: `min p <= alpha / K`.
    pub overall: bool,
}

/// Holm's step-down procedure.
pub fn holm_combine(pvalues: &[f64], alpha: f64) -> HolmResult {
    let k = pvalues.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let mut reject = vec![false; k];
    for (rank, &j) in order.iter().enumerate() {
        if pvalues[j] <= alpha / (k - rank) as f64 {
            reject[j] = true;
        } else {
            break;
        }
    }
    let overall = pvalues.iter().any(|&p| p <= alpha / k as f64);
    HolmResult { reject, overall }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaSearch {
    pub lo: f64,
    /// First upper probe; doubled until the rejection fails.
    pub hi: f64,
    pub tol: f64,
    pub cap: f64,
}

impl Default for GammaSearch {
    fn default() -> Self {
        Self {
            lo: 1.0,
            hi: 2.0,
            tol: 1e-3,
            cap: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaChangepoint {
    pub gamma_star: f64,
    /// Rejection holds at `gamma_star - bracket` and fails at
    /// `gamma_star + bracket`.
    pub bracket: f64,
    pub method: String,
    pub evaluations: usize,
    pub anomalies: Vec<String>,
}

/// Smallest `Gamma` at which `reject_at` stops rejecting, by doubling then
/// bisection.
pub fn gamma_star<F>(method: &str, mut reject_at: F, search: &GammaSearch) -> Result<GammaChangepoint>
where
    F: FnMut(Gamma) -> Result<bool>,
{
    if !(search.lo >= 1.0 && search.hi > search.lo && search.tol > 0.0 && search.cap >= search.hi) {
        return Err(SensiError::invalid("invalid Gamma search settings"));
    }
    let mut evaluations = 0;
    let mut anomalies = Vec::new();
    let mut eval = |g: f64, evaluations: &mut usize| -> Result<bool> {
        *evaluations += 1;
        reject_at(Gamma::new(g)?)
    };
    if !eval(search.lo, &mut evaluations)? {
        return Ok(GammaChangepoint {
            gamma_star: search.lo,
            bracket: 0.0,
            method: method.to_string(),
            evaluations,
            anomalies: vec![format!("no rejection at Gamma = {}", search.lo)],
        });
    }
    let mut lo = search.lo;
    let mut hi = search.hi;
    loop {
        if !eval(hi, &mut evaluations)? {
            break;
        }
        lo = hi;
        if hi >= search.cap {
            anomalies.push(format!("still rejecting at the cap Gamma = {}", search.cap));
            warn!("{method}: rejection persists up to Gamma = {}", search.cap);
            return Ok(GammaChangepoint {
                gamma_star: search.cap,
                bracket: 0.0,
                method: method.to_string(),
                evaluations,
                anomalies,
            });
        }
        hi = (2.0 * hi).min(search.cap);
    }
    while hi - lo > 2.0 * search.tol {
        let mid = 0.5 * (lo + hi);
        if eval(mid, &mut evaluations)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // A failure below a rejection would mean the decision is not monotone.
    if lo > search.lo && !eval(lo, &mut evaluations)? {
        anomalies.push(format!("decision flipped on re-evaluation at Gamma = {lo}"));
        warn!("{method}: non-monotone decision near Gamma = {lo}");
    }
    Ok(GammaChangepoint {
        gamma_star: 0.5 * (lo + hi),
        bracket: 0.5 * (hi - lo),
        method: method.to_string(),
        evaluations,
        anomalies,
    })
}
