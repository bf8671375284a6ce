//! Inference under uniform within-stratum assignment (`Gamma = 1`).

use serde::{Deserialize, Serialize};

use crate::design::MatchedDesign;
use crate::error::{Result, SensiError};
use crate::normal;
use crate::stats::ScoreMatrix;

pub const DEFAULT_ENUMERATION_CAP: f64 = 1_048_576.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and variance of `sum_ij Z_ij q_ij` when stratum `i` picks its treated
/// member with probabilities `rho[offsets[i]..offsets[i+1]]`.
pub fn moments(q: &[f64], offsets: &[usize], rho: &[f64]) -> MomentPair {
    let mut mean = 0.0;
    let mut variance = 0.0;
    for w in offsets.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for g in lo..hi {
            m1 += rho[g] * q[g];
            m2 += rho[g] * q[g] * q[g];
        }
        mean += m1;
        variance += m2 - m1 * m1;
    }
    MomentPair {
        mean,
        variance: variance.max(0.0),
    }
}

/// Moments of outcome `k` at `rho_ij = 1/n_i`.
pub fn uniform_moments(scores: &ScoreMatrix, design: &MatchedDesign, k: usize) -> MomentPair {
    let q = &scores.column(k).q;
    let mut mean = 0.0;
    let mut variance = 0.0;
    for w in design.offsets().windows(2) {
        let block = &q[w[0]..w[1]];
        let n = block.len() as f64;
        let m1 = block.iter().sum::<f64>() / n;
        let m2 = block.iter().map(|v| v * v).sum::<f64>() / n;
        mean += m1;
        variance += m2 - m1 * m1;
    }
    MomentPair {
        mean,
        variance: variance.max(0.0),
    }
}

/// Standardized deviate `(t - mean) / sd`.
pub fn deviate(t: f64, m: MomentPair) -> Result<f64> {
    if !(m.variance > 0.0) {
        return Err(SensiError::DegenerateStatistic);
    }
    Ok((t - m.mean) / m.variance.sqrt())
}

pub fn squared_deviate(t: f64, m: MomentPair) -> Result<f64> {
    deviate(t, m).map(|d| d * d)
}

/// Two-sided normal-approximation p-value at `Gamma = 1`.
pub fn uniform_two_sided_pvalue(scores: &ScoreMatrix, design: &MatchedDesign, k: usize) -> Result<f64> {
    let d = deviate(scores.column(k).t_obs, uniform_moments(scores, design, k))?;
    Ok(normal::two_sided_pvalue(d))
}

/// Counts assignments `z` (one treated per stratum) with `t(z) >= a`,
/// returning `(count, |Omega|)`. Values within a relative `1e-9` of `a` count
/// as ties and are included.
pub fn exact_tail_count(
    q: &[f64],
    offsets: &[usize],
    a: f64,
    cap: f64,
) -> Result<(u64, u64)> {
    let sizes: Vec<usize> = offsets.windows(2).map(|w| w[1] - w[0]).collect();
    let total: f64 = sizes.iter().map(|&n| n as f64).product();
    if total > cap {
        return Err(SensiError::CapExceeded { size: total, cap });
    }
    let scale = q.iter().map(|v| v.abs()).sum::<f64>().max(a.abs()).max(1.0);
    let threshold = a - 1e-9 * scale;

    let mut choice = vec![0usize; sizes.len()];
    let mut t: f64 = offsets[..sizes.len()].iter().map(|&o| q[o]).sum();
    let mut count = 0u64;
    let mut seen = 0u64;
    loop {
        seen += 1;
        if t >= threshold {
            count += 1;
        }
        // odometer step; recompute t periodically to avoid drift
        let mut i = 0;
        loop {
            if i == sizes.len() {
                return Ok((count, seen));
            }
            let old = offsets[i] + choice[i];
            choice[i] += 1;
            if choice[i] < sizes[i] {
                t += q[offsets[i] + choice[i]] - q[old];
                break;
            }
            choice[i] = 0;
            t += q[offsets[i]] - q[old];
            i += 1;
        }
        if seen.is_multiple_of(4096) {
            t = choice.iter().zip(offsets).map(|(&c, &o)| q[o + c]).sum();
        }
    }
}

/// `P(t_k >= a)` under uniform assignment, by enumerating every assignment.
pub fn exact_tail_probability(
    scores: &ScoreMatrix,
    design: &MatchedDesign,
    k: usize,
    a: f64,
    cap: f64,
) -> Result<f64> {
    let (count, total) = exact_tail_count(&scores.column(k).q, design.offsets(), a, cap)?;
    Ok(count as f64 / total as f64)
}

/// Two-sided exact p-value: twice the smaller tail, capped at one.
pub fn exact_two_sided_pvalue(
    scores: &ScoreMatrix,
    design: &MatchedDesign,
    k: usize,
    cap: f64,
) -> Result<f64> {
    let col = scores.column(k);
    let upper = exact_tail_probability(scores, design, k, col.t_obs, cap)?;
    let neg: Vec<f64> = col.q.iter().map(|v| -v).collect();
    let (c, n) = exact_tail_count(&neg, design.offsets(), -col.t_obs, cap)?;
    let lower = c as f64 / n as f64;
    Ok((2.0 * upper.min(lower)).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{Member, Stratum};
    use crate::stats::{ScoreColumn, StatisticKind};

    fn fixture(blocks: &[Vec<f64>]) -> (MatchedDesign, ScoreMatrix) {
        let strata = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| Stratum {
                id: i.to_string(),
                members: b
                    .iter()
                    .enumerate()
                    .map(|(j, _)| Member {
                        treated: j == 0,
                        outcomes: vec![0.0],
                    })
                    .collect(),
                flipped: false,
            })
            .collect();
        let d = MatchedDesign::new(strata, vec!["y".into()]).unwrap();
        let q: Vec<f64> = blocks.iter().flatten().copied().collect();
        let col = ScoreColumn::from_scores(StatisticKind::MeanDifference, q, &d);
        (d, ScoreMatrix { columns: vec![col] })
    }

    #[test]
    fn uniform_moment_examples() {
        let (d, s) = fixture(&[vec![3.0, 1.0, 2.0]]);
        let m = uniform_moments(&s, &d, 0);
        assert!((m.mean - 2.0).abs() < 1e-15 && (m.variance - 2.0 / 3.0).abs() < 1e-15);
        let (d, s) = fixture(&[vec![1.0, 0.0]]);
        assert_eq!(uniform_moments(&s, &d, 0), MomentPair { mean: 0.5, variance: 0.25 });
        let (d, s) = fixture(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(uniform_moments(&s, &d, 0), MomentPair { mean: 1.0, variance: 0.5 });
    }

    #[test]
    fn exact_tail_examples() {
        let cap = DEFAULT_ENUMERATION_CAP;
        let (d, s) = fixture(&[vec![1.0, 0.0]]);
        assert_eq!(exact_tail_probability(&s, &d, 0, 1.0, cap).unwrap(), 0.5);
        let (d, s) = fixture(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(exact_tail_probability(&s, &d, 0, 2.0, cap).unwrap(), 0.25);
        let (d, s) = fixture(&[vec![3.0, 1.0, 2.0]]);
        assert!((exact_tail_probability(&s, &d, 0, 2.0, cap).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(exact_tail_probability(&s, &d, 0, 1.0, cap).unwrap(), 1.0);
        assert_eq!(exact_tail_probability(&s, &d, 0, 3.0 + 1e-6, cap).unwrap(), 0.0);
        assert!(matches!(
            exact_tail_probability(&s, &d, 0, 1.0, 2.0),
            Err(SensiError::CapExceeded { .. })
        ));
    }

    #[test]
    fn deviate_examples() {
        let m = MomentPair { mean: 0.5, variance: 0.25 };
        assert_eq!(deviate(0.5, m).unwrap(), 0.0);
        assert_eq!(deviate(1.0, m).unwrap(), 1.0);
        assert_eq!(deviate(2.0, MomentPair { mean: 2.0, variance: 2.0 / 3.0 }).unwrap(), 0.0);
        assert!(matches!(
            deviate(1.0, MomentPair { mean: 0.0, variance: 0.0 }),
            Err(SensiError::DegenerateStatistic)
        ));
    }
}
