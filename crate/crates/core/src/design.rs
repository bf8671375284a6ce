//! Matched designs, their CSV ingestion, and null hypotheses on the outcomes.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SensiError};

/// One individual in a matched set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub treated: bool,
    pub outcomes: Vec<f64>,
}

/// A matched set. After canonicalization exactly one member is flagged as
/// treated; `flipped` records that the labels were swapped to get there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub id: String,
    pub members: Vec<Member>,
    #[serde(default)]
    pub flipped: bool,
}

impl Stratum {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Index of the (canonical) treated member.
    pub fn treated_index(&self) -> usize {
        self.members
            .iter()
            .position(|m| m.treated)
            .expect("canonical stratum has a treated member")
    }

    /// `+1` for ordinary strata, `-1` for strata whose labels were swapped.
    pub fn orientation(&self) -> f64 {
        if self.flipped {
            -1.0
        } else {
            1.0
        }
    }

    /// Whether member `j` received the treatment in the data as recorded.
    pub fn originally_treated(&self, j: usize) -> bool {
        self.members[j].treated != self.flipped
    }

    fn canonicalize(&mut self) -> Result<()> {
        let n = self.members.len();
        if n < 2 {
            return Err(SensiError::InvalidStratum {
                stratum: self.id.clone(),
                message: format!("needs at least 2 members, found {n}"),
            });
        }
        let treated = self.members.iter().filter(|m| m.treated).count();
        if treated == 1 {
            return Ok(());
        }
        if treated >= 2 && n - treated == 1 {
            for m in &mut self.members {
                m.treated = !m.treated;
            }
            self.flipped = !self.flipped;
            return Ok(());
        }
        Err(SensiError::InvalidStratum {
            stratum: self.id.clone(),
            message: format!(
                "{treated} treated and {} control members; need exactly one of either",
                n - treated
            ),
        })
    }
}

/// A validated collection of matched sets sharing `K` outcome columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedDesign {
    strata: Vec<Stratum>,
    outcome_names: Vec<String>,
    offsets: Vec<usize>,
}

impl MatchedDesign {
    /// Validates and canonicalizes the strata.
    pub fn new(mut strata: Vec<Stratum>, outcome_names: Vec<String>) -> Result<Self> {
        if strata.is_empty() {
            return Err(SensiError::NoStrata);
        }
        if outcome_names.is_empty() {
            return Err(SensiError::invalid("at least one outcome is required"));
        }
        let k = outcome_names.len();
        let mut offsets = Vec::with_capacity(strata.len() + 1);
        offsets.push(0);
        for s in &mut strata {
            s.canonicalize()?;
            for m in &s.members {
                if m.outcomes.len() != k {
                    return Err(SensiError::InvalidStratum {
                        stratum: s.id.clone(),
                        message: format!("member has {} outcomes, expected {k}", m.outcomes.len()),
                    });
                }
                if m.outcomes.iter().any(|v| !v.is_finite()) {
                    return Err(SensiError::InvalidStratum {
                        stratum: s.id.clone(),
                        message: "non-finite outcome value".into(),
                    });
                }
            }
            offsets.push(offsets.last().unwrap() + s.len());
        }
        Ok(Self {
            strata,
            outcome_names,
            offsets,
        })
    }

    /// Convenience constructor for matched pairs given treated-minus-control
    /// style rows: each entry is `(treated outcomes, control outcomes)`.
    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let k = pairs.first().map_or(0, |p| p.0.len());
        let strata = pairs
            .iter()
            .enumerate()
            .map(|(i, (t, c))| Stratum {
                id: format!("{}", i + 1),
                members: vec![
                    Member {
                        treated: true,
                        outcomes: t.clone(),
                    },
                    Member {
                        treated: false,
                        outcomes: c.clone(),
                    },
                ],
                flipped: false,
            })
            .collect();
        Self::new(strata, (1..=k).map(|j| format!("y{j}")).collect())
    }

    /// Re-runs canonicalization. Canonical designs are returned unchanged.
    pub fn canonicalized(&self) -> Result<Self> {
        Self::new(self.strata.clone(), self.outcome_names.clone())
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }

    /// Number of strata `I`.
    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    /// Number of outcomes `K`.
    pub fn n_outcomes(&self) -> usize {
        self.outcome_names.len()
    }

    /// Total number of individuals `N`.
    pub fn n_total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Start of stratum `i` in the global member order; `offsets()[I] = N`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn stratum_sizes(&self) -> Vec<usize> {
        self.strata.iter().map(Stratum::len).collect()
    }

    pub fn all_pairs(&self) -> bool {
        self.strata.iter().all(|s| s.len() == 2)
    }

    /// Global indices of the canonical treated members.
    pub fn treated_indices(&self) -> Vec<usize> {
        self.strata
            .iter()
            .zip(&self.offsets)
            .map(|(s, &o)| o + s.treated_index())
            .collect()
    }

    /// Raw outcome column `k` in global member order.
    pub fn outcome_column(&self, k: usize) -> Vec<f64> {
        self.strata
            .iter()
            .flat_map(|s| s.members.iter().map(move |m| m.outcomes[k]))
            .collect()
    }
}

/// Names of the columns holding the stratum id, the treatment flag and the
/// outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub stratum: String,
    pub treated: String,
    pub outcomes: Vec<String>,
}

impl ColumnSchema {
    pub fn new(outcomes: Vec<String>) -> Self {
        Self {
            stratum: "stratum".into(),
            treated: "treated".into(),
            outcomes,
        }
    }
}

pub fn load_design(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<MatchedDesign> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| SensiError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_design(file, schema)
}

/// Parses a design from CSV text with a header row.
pub fn read_design<R: Read>(reader: R, schema: &ColumnSchema) -> Result<MatchedDesign> {
    if schema.outcomes.is_empty() {
        return Err(SensiError::invalid("schema names no outcome columns"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SensiError::MissingColumn(name.to_string()))
    };
    let stratum_col = find(&schema.stratum)?;
    let treated_col = find(&schema.treated)?;
    let outcome_cols = schema
        .outcomes
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;

    let mut strata: Vec<Stratum> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let id = record.get(stratum_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(SensiError::BadValue {
                line,
                column: schema.stratum.clone(),
                message: "empty stratum id".into(),
            });
        }
        let treated = parse_flag(record.get(treated_col).unwrap_or("")).ok_or_else(|| {
            SensiError::BadValue {
                line,
                column: schema.treated.clone(),
                message: format!(
                    "expected 0 or 1, found `{}`",
                    record.get(treated_col).unwrap_or("")
                ),
            }
        })?;
        let mut outcomes = Vec::with_capacity(outcome_cols.len());
        for (&c, name) in outcome_cols.iter().zip(&schema.outcomes) {
            let raw = record.get(c).unwrap_or("");
            let value: f64 = raw.parse().map_err(|_| SensiError::BadValue {
                line,
                column: name.clone(),
                message: if raw.is_empty() {
                    "missing value".into()
                } else {
                    format!("not a number: `{raw}`")
                },
            })?;
            if !value.is_finite() {
                return Err(SensiError::BadValue {
                    line,
                    column: name.clone(),
                    message: format!("non-finite value `{raw}`"),
                });
            }
            outcomes.push(value);
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            strata.push(Stratum {
                id,
                members: Vec::new(),
                flipped: false,
            });
            strata.len() - 1
        });
        strata[slot].members.push(Member { treated, outcomes });
    }
    MatchedDesign::new(strata, schema.outcomes.clone())
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw {
        "1" | "1.0" => Some(true),
        "0" | "0.0" => Some(false),
        _ => None,
    }
}

/// Sensitivity parameter `Gamma = exp(gamma) >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Gamma(f64);

impl Gamma {
    pub const ONE: Gamma = Gamma(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 1.0 {
            Ok(Gamma(value))
        } else {
            Err(SensiError::invalid(format!("Gamma must be finite and >= 1, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `gamma = log Gamma`.
    pub fn log(self) -> f64 {
        self.0.ln()
    }

    pub fn is_one(self) -> bool {
        self.0 <= 1.0 + 1e-12
    }
}

impl TryFrom<f64> for Gamma {
    type Error = SensiError;
    fn try_from(v: f64) -> Result<Self> {
        Gamma::new(v)
    }
}

impl From<Gamma> for f64 {
    fn from(g: Gamma) -> f64 {
        g.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum NullKind {
    /// Fisher's sharp null of no effect.
    Sharp,
    /// Treated responses exceed their control counterparts by `tau`.
    Additive(f64),
    /// Treated responses are `beta` times their control counterparts; tested
    /// on the log scale.
    Multiplicative(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    Greater,
    Less,
}

impl Alternative {
    pub fn is_two_sided(self) -> bool {
        self == Alternative::TwoSided
    }
}

/// Per-outcome null and alternative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSpec {
    pub nulls: Vec<NullKind>,
    pub alternatives: Vec<Alternative>,
}

impl HypothesisSpec {
    pub fn sharp(k: usize, alternative: Alternative) -> Self {
        Self {
            nulls: vec![NullKind::Sharp; k],
            alternatives: vec![alternative; k],
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.nulls.len() != k || self.alternatives.len() != k {
            return Err(SensiError::invalid(format!(
                "hypothesis covers {} nulls and {} alternatives, design has {k} outcomes",
                self.nulls.len(),
                self.alternatives.len()
            )));
        }
        for null in &self.nulls {
            match *null {
                NullKind::Sharp => {}
                NullKind::Additive(tau) if tau.is_finite() => {}
                NullKind::Multiplicative(beta) if beta.is_finite() && beta > 0.0 => {}
                other => {
                    return Err(SensiError::invalid(format!("invalid null {other:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Adjusted responses `F`, stored per outcome in global member order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedOutcomes {
    columns: Vec<Vec<f64>>,
}

impl AdjustedOutcomes {
    pub fn new(columns: Vec<Vec<f64>>) -> Self {
        Self { columns }
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k]
    }

    pub fn n_outcomes(&self) -> usize {
        self.columns.len()
    }
}

/// Removes the hypothesized effect from the treated responses so that the
/// adjusted values are fixed under the null.
pub fn apply_hypothesis(design: &MatchedDesign, spec: &HypothesisSpec) -> Result<AdjustedOutcomes> {
    spec.validate(design.n_outcomes())?;
    let mut columns = Vec::with_capacity(design.n_outcomes());
    for (k, null) in spec.nulls.iter().enumerate() {
        let mut col = Vec::with_capacity(design.n_total());
        for s in design.strata() {
            for (j, m) in s.members.iter().enumerate() {
                let r = m.outcomes[k];
                let treated = s.originally_treated(j);
                let f = match *null {
                    NullKind::Sharp => r,
                    NullKind::Additive(tau) => {
                        if treated {
                            r - tau
                        } else {
                            r
                        }
                    }
                    NullKind::Multiplicative(beta) => {
                        if r <= 0.0 {
                            return Err(SensiError::InvalidStratum {
                                stratum: s.id.clone(),
                                message: format!(
                                    "outcome `{}` value {r} is not positive; \
                                     a multiplicative null needs positive responses",
                                    design.outcome_names()[k]
                                ),
                            });
                        }
                        if treated {
                            r.ln() - beta.ln()
                        } else {
                            r.ln()
                        }
                    }
                };
                col.push(f);
            }
        }
        columns.push(col);
    }
    Ok(AdjustedOutcomes { columns })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema1() -> ColumnSchema {
        ColumnSchema::new(vec!["y".into()])
    }

    #[test]
    fn parses_pairs_in_order() {
        let csv = "stratum,treated,y\nA,1,5\nA,0,3\nA2,1,2\nA2,0,2.5\n";
        let d = read_design(csv.as_bytes(), &schema1()).unwrap();
        assert_eq!(d.n_strata(), 2);
        assert_eq!(d.stratum_sizes(), vec![2, 2]);
        assert_eq!(d.n_outcomes(), 1);
        assert_eq!(d.strata()[1].id, "A2");
        assert_eq!(d.outcome_column(0), vec![5.0, 3.0, 2.0, 2.5]);
    }

    #[test]
    fn flips_single_control_sets() {
        let csv = "stratum,treated,y\nA,1,5\nA,1,3\nA,0,1\n";
        let d = read_design(csv.as_bytes(), &schema1()).unwrap();
        let s = &d.strata()[0];
        assert!(s.flipped);
        assert_eq!(s.treated_index(), 2);
        assert!(s.originally_treated(0) && !s.originally_treated(2));
        let again = d.canonicalized().unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn rejects_mixed_sets() {
        let csv = "stratum,treated,y\nA,1,5\nA,1,3\nA,0,1\nA,0,2\n";
        let err = read_design(csv.as_bytes(), &schema1()).unwrap_err();
        assert!(matches!(err, SensiError::InvalidStratum { .. }));
        let csv = "stratum,treated,y\nA,0,5\nA,0,3\n";
        assert!(read_design(csv.as_bytes(), &schema1()).is_err());
        let csv = "stratum,treated,y\nA,1,5\n";
        assert!(read_design(csv.as_bytes(), &schema1()).is_err());
    }

    #[test]
    fn empty_file_has_no_strata() {
        let err = read_design("stratum,treated,y\n".as_bytes(), &schema1()).unwrap_err();
        assert_eq!(err.to_string(), "no strata");
    }

    #[test]
    fn bad_values_name_line_and_column() {
        let csv = "stratum,treated,y\nA,1,5\nA,2,3\n";
        let err = read_design(csv.as_bytes(), &schema1()).unwrap_err();
        match err {
            SensiError::BadValue { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "treated");
            }
            other => panic!("{other:?}"),
        }
        let csv = "stratum,treated,y\nA,1,\nA,0,3\n";
        let err = read_design(csv.as_bytes(), &schema1()).unwrap_err();
        assert!(err.to_string().contains("missing value"), "{err}");
        let err = read_design(csv.as_bytes(), &ColumnSchema::new(vec!["z".into()])).unwrap_err();
        assert!(matches!(err, SensiError::MissingColumn(c) if c == "z"));
    }

    #[test]
    fn hypothesis_adjustments() {
        let d = MatchedDesign::from_pairs(&[(vec![5.0], vec![3.0])]).unwrap();
        let sharp = apply_hypothesis(&d, &HypothesisSpec::sharp(1, Alternative::TwoSided)).unwrap();
        assert_eq!(sharp.column(0), &[5.0, 3.0]);
        let add = HypothesisSpec {
            nulls: vec![NullKind::Additive(2.0)],
            alternatives: vec![Alternative::TwoSided],
        };
        assert_eq!(apply_hypothesis(&d, &add).unwrap().column(0), &[3.0, 3.0]);

        let e4 = 4f64.exp();
        let d = MatchedDesign::from_pairs(&[(vec![e4], vec![1.0])]).unwrap();
        let mult = HypothesisSpec {
            nulls: vec![NullKind::Multiplicative(std::f64::consts::E)],
            alternatives: vec![Alternative::TwoSided],
        };
        let f = apply_hypothesis(&d, &mult).unwrap();
        assert!((f.column(0)[0] - 3.0).abs() < 1e-12);
        assert_eq!(f.column(0)[1], 0.0);

        let d = MatchedDesign::from_pairs(&[(vec![1.0], vec![-1.0])]).unwrap();
        assert!(apply_hypothesis(&d, &mult).is_err());
    }

    #[test]
    fn additive_null_follows_original_labels() {
        let csv = "stratum,treated,y\nA,1,5\nA,1,3\nA,0,1\n";
        let d = read_design(csv.as_bytes(), &schema1()).unwrap();
        let add = HypothesisSpec {
            nulls: vec![NullKind::Additive(1.0)],
            alternatives: vec![Alternative::TwoSided],
        };
        assert_eq!(apply_hypothesis(&d, &add).unwrap().column(0), &[4.0, 2.0, 1.0]);
    }

    #[test]
    fn gamma_bounds() {
        assert!(Gamma::new(0.5).is_err());
        assert!(Gamma::new(f64::NAN).is_err());
        let g = Gamma::new(std::f64::consts::E).unwrap();
        assert!((g.log() - 1.0).abs() < 1e-15);
    }
}
