//! Score constants `q_ijk` of the supported sum statistics
//! `t_k = sum_ij Z_ij q_ijk`.
//!
//! Scores are computed on the adjusted responses in the stored member order
//! and then multiplied by the stratum orientation, so that strata whose
//! labels were swapped during canonicalization keep the sign of the original
//! statistic up to an additive constant.

use serde::{Deserialize, Serialize};

use crate::design::{AdjustedOutcomes, MatchedDesign};
use crate::error::{Result, SensiError};

pub const DEFAULT_HUBER_TRUNCATION: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StatisticKind {
    /// Average treated-minus-control difference.
    MeanDifference,
    /// Ranks of the responses aligned by their stratum means.
    AlignedRank,
    /// Wilcoxon's signed rank statistic; pairs only.
    SignedRank,
    /// Huber M-statistic `sum psi(D_i / s)`; pairs only.
    HuberM { truncation: f64 },
}

impl StatisticKind {
    pub fn huber() -> Self {
        StatisticKind::HuberM {
            truncation: DEFAULT_HUBER_TRUNCATION,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StatisticKind::MeanDifference => "mean-difference",
            StatisticKind::AlignedRank => "aligned-rank",
            StatisticKind::SignedRank => "signed-rank",
            StatisticKind::HuberM { .. } => "huber-m",
        }
    }
}

impl std::str::FromStr for StatisticKind {
    type Err = SensiError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-difference" | "mean" => Ok(StatisticKind::MeanDifference),
            "aligned-rank" => Ok(StatisticKind::AlignedRank),
            "signed-rank" => Ok(StatisticKind::SignedRank),
            "huber-m" | "huber" => Ok(StatisticKind::huber()),
            other => Err(SensiError::invalid(format!("unknown statistic `{other}`"))),
        }
    }
}

/// Scores for one outcome, in global member order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreColumn {
    pub kind: StatisticKind,
    pub q: Vec<f64>,
    pub t_obs: f64,
}

impl ScoreColumn {
    /// Builds a column from raw scores, evaluating `t` on the treated members.
    pub fn from_scores(kind: StatisticKind, q: Vec<f64>, design: &MatchedDesign) -> Self {
        let t_obs = design.treated_indices().iter().map(|&g| q[g]).sum();
        Self { kind, q, t_obs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub columns: Vec<ScoreColumn>,
}

impl ScoreMatrix {
    /// Builds one column per outcome, outcome `k` using `kinds[k]`.
    pub fn build(
        design: &MatchedDesign,
        f: &AdjustedOutcomes,
        kinds: &[StatisticKind],
    ) -> Result<Self> {
        if kinds.len() != f.n_outcomes() || kinds.len() != design.n_outcomes() {
            return Err(SensiError::invalid(format!(
                "{} statistics for {} outcomes",
                kinds.len(),
                design.n_outcomes()
            )));
        }
        let columns = kinds
            .iter()
            .enumerate()
            .map(|(k, &kind)| score_column(design, f.column(k), kind))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { columns })
    }

    pub fn n_outcomes(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, k: usize) -> &ScoreColumn {
        &self.columns[k]
    }
}

pub fn score_column(
    design: &MatchedDesign,
    f: &[f64],
    kind: StatisticKind,
) -> Result<ScoreColumn> {
    let mut q = match kind {
        StatisticKind::MeanDifference => scores_mean_difference(design, f),
        StatisticKind::AlignedRank => scores_aligned_rank(design, f),
        StatisticKind::SignedRank => scores_signed_rank(design, f)?,
        StatisticKind::HuberM { truncation } => scores_huber_m(design, f, truncation)?,
    };
    let offsets = design.offsets();
    for (i, s) in design.strata().iter().enumerate() {
        if s.flipped {
            for v in &mut q[offsets[i]..offsets[i + 1]] {
                *v = -*v;
            }
        }
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(SensiError::invalid("non-finite score"));
    }
    Ok(ScoreColumn::from_scores(kind, q, design))
}

/// `q_ij = sum_{j' != j} (F_ij - F_ij') / (I (n_i - 1))`.
pub fn scores_mean_difference(design: &MatchedDesign, f: &[f64]) -> Vec<f64> {
    let big_i = design.n_strata() as f64;
    let offsets = design.offsets();
    let mut q = vec![0.0; f.len()];
    for i in 0..design.n_strata() {
        let block = &f[offsets[i]..offsets[i + 1]];
        let n = block.len() as f64;
        let total: f64 = block.iter().sum();
        for (j, &v) in block.iter().enumerate() {
            // sum_{j'} (v - F_j') = n v - total
            q[offsets[i] + j] = (n * v - total) / (big_i * (n - 1.0));
        }
    }
    q
}

/// Ranks `1..N` of `F_ij - mean_i F`, ties averaged.
pub fn scores_aligned_rank(design: &MatchedDesign, f: &[f64]) -> Vec<f64> {
    let offsets = design.offsets();
    let mut aligned = vec![0.0; f.len()];
    for i in 0..design.n_strata() {
        let block = &f[offsets[i]..offsets[i + 1]];
        let mean = block.iter().sum::<f64>() / block.len() as f64;
        for (j, &v) in block.iter().enumerate() {
            aligned[offsets[i] + j] = v - mean;
        }
    }
    midranks(&aligned)
}

/// `q_ij = d_i 1{F_ij > F_ij'}` with `d_i` the midrank of `|F_i1 - F_i2|`
/// among the nonzero differences; pairs with equal responses score 0.
pub fn scores_signed_rank(design: &MatchedDesign, f: &[f64]) -> Result<Vec<f64>> {
    require_pairs(design, "signed-rank")?;
    let diffs: Vec<f64> = (0..design.n_strata())
        .map(|i| f[2 * i] - f[2 * i + 1])
        .collect();
    let nonzero: Vec<usize> = (0..diffs.len()).filter(|&i| diffs[i] != 0.0).collect();
    let ranks = midranks(&nonzero.iter().map(|&i| diffs[i].abs()).collect::<Vec<_>>());
    let mut q = vec![0.0; f.len()];
    for (&i, &d) in nonzero.iter().zip(&ranks) {
        if diffs[i] > 0.0 {
            q[2 * i] = d;
        } else {
            q[2 * i + 1] = d;
        }
    }
    Ok(q)
}

/// `psi(y) = sign(y) min(|y|, c)`.
pub fn huber_psi(y: f64, truncation: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y.signum() * y.abs().min(truncation)
    }
}

/// Pair scores `q_i1 = psi(D_i / s)`, `q_i2 = psi(-D_i / s)` with
/// `D_i = F_i1 - F_i2` and `s` the median of `|D_i|`.
pub fn scores_huber_m(design: &MatchedDesign, f: &[f64], truncation: f64) -> Result<Vec<f64>> {
    require_pairs(design, "huber-m")?;
    if !(truncation > 0.0 && truncation.is_finite()) {
        return Err(SensiError::invalid("Huber truncation must be positive"));
    }
    let diffs: Vec<f64> = (0..design.n_strata())
        .map(|i| f[2 * i] - f[2 * i + 1])
        .collect();
    let scale = median(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    if scale <= 0.0 {
        return Err(SensiError::invalid(
            "Huber scale is zero: at least half of the pair differences are zero",
        ));
    }
    let mut q = vec![0.0; f.len()];
    for (i, &d) in diffs.iter().enumerate() {
        q[2 * i] = huber_psi(d / scale, truncation);
        q[2 * i + 1] = huber_psi(-d / scale, truncation);
    }
    Ok(q)
}

fn require_pairs(design: &MatchedDesign, what: &str) -> Result<()> {
    if let Some(s) = design.strata().iter().find(|s| s.len() != 2) {
        return Err(SensiError::InvalidStratum {
            stratum: s.id.clone(),
            message: format!("{what} needs matched pairs, stratum has {} members", s.len()),
        });
    }
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ranks `1..n` with tied values sharing the average of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{read_design, ColumnSchema, Member, Stratum};

    fn design(sizes_and_f: &[Vec<f64>]) -> MatchedDesign {
        let strata = sizes_and_f
            .iter()
            .enumerate()
            .map(|(i, f)| Stratum {
                id: i.to_string(),
                members: f
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| Member {
                        treated: j == 0,
                        outcomes: vec![v],
                    })
                    .collect(),
                flipped: false,
            })
            .collect();
        MatchedDesign::new(strata, vec!["y".into()]).unwrap()
    }

    fn col(d: &MatchedDesign, kind: StatisticKind) -> ScoreColumn {
        score_column(d, &d.outcome_column(0), kind).unwrap()
    }

    #[test]
    fn mean_difference_examples() {
        let c = col(&design(&[vec![4.0, 1.0]]), StatisticKind::MeanDifference);
        assert_eq!(c.q, vec![3.0, -3.0]);
        assert_eq!(c.t_obs, 3.0);
        let c = col(
            &design(&[vec![4.0, 1.0], vec![2.0, 2.0]]),
            StatisticKind::MeanDifference,
        );
        assert_eq!(c.q, vec![1.5, -1.5, 0.0, 0.0]);
        let c = col(&design(&[vec![6.0, 0.0, 3.0]]), StatisticKind::MeanDifference);
        assert_eq!(c.q[0], 4.5);
    }

    #[test]
    fn aligned_rank_examples() {
        let c = col(
            &design(&[vec![4.0, 1.0], vec![2.0, 2.0]]),
            StatisticKind::AlignedRank,
        );
        assert_eq!(c.q, vec![4.0, 1.0, 2.5, 2.5]);
        let c = col(&design(&[vec![1.0, 1.0], vec![7.0, 7.0]]), StatisticKind::AlignedRank);
        assert!(c.q.iter().all(|&r| r == 2.5));
    }

    #[test]
    fn signed_rank_examples() {
        let c = col(&design(&[vec![5.0, 2.0], vec![0.0, 1.0]]), StatisticKind::SignedRank);
        assert_eq!(c.q, vec![2.0, 0.0, 0.0, 1.0]);
        let c = col(&design(&[vec![2.0, 0.0], vec![0.0, 2.0]]), StatisticKind::SignedRank);
        assert_eq!(c.q, vec![1.5, 0.0, 0.0, 1.5]);
        let c = col(&design(&[vec![3.0, 3.0], vec![0.0, 2.0]]), StatisticKind::SignedRank);
        assert_eq!(&c.q[..2], &[0.0, 0.0]);
        assert_eq!(&c.q[2..], &[0.0, 1.0]);
        assert!(score_column(
            &design(&[vec![1.0, 2.0, 3.0]]),
            &[1.0, 2.0, 3.0],
            StatisticKind::SignedRank
        )
        .is_err());
    }

    #[test]
    fn huber_psi_truncates() {
        assert_eq!(huber_psi(4.0, 2.5), 2.5);
        assert_eq!(huber_psi(-1.0, 2.5), -1.0);
        assert_eq!(huber_psi(0.0, 2.5), 0.0);
        assert_eq!(huber_psi(-7.0, 2.5), -2.5);
    }

    #[test]
    fn huber_scores_are_odd() {
        let d = design(&[vec![4.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]);
        let c = col(&d, StatisticKind::huber());
        // |D| = [4, 1, 2], median 2
        assert_eq!(c.q, vec![2.0, -2.0, -0.5, 0.5, 1.0, -1.0]);
        assert_eq!(c.t_obs, 2.0 - 0.5 + 1.0);
        let zero = design(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]]);
        assert!(score_column(&zero, &zero.outcome_column(0), StatisticKind::huber()).is_err());
    }

    #[test]
    fn flipped_strata_negate_scores() {
        let csv = "stratum,treated,y\nA,1,6\nA,1,0\nA,0,3\n";
        let d = read_design(csv.as_bytes(), &ColumnSchema::new(vec!["y".into()])).unwrap();
        let c = col(&d, StatisticKind::MeanDifference);
        // unflipped scores [4.5, -4.5, 0], negated
        assert_eq!(c.q, vec![-4.5, 4.5, 0.0]);
        assert_eq!(c.t_obs, 0.0);
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
