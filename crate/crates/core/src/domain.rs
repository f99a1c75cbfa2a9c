//! Domain types shared by every stage of the benchmark: conditions, cases,
//! datasets, splits and probability vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of instances pooled into one case.
pub const MAX_INSTANCES: usize = 6;

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionStatus {
    Inlier,
    Outlier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
}

impl RiskLevel {
    pub const ALL: [RiskLevel; 3] = [RiskLevel::Low, RiskLevel::Medium, RiskLevel::High];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskLevel::Low => "low",
            RiskLevel::Medium => "medium",
            RiskLevel::High => "high",
        })
    }
}

/// Fitzpatrick skin type buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkinType {
    T12,
    T3,
    T4,
    T56,
    #[serde(rename = "unknown")]
    Unknown,
}

impl SkinType {
    pub const ALL: [SkinType; 5] = [
        SkinType::T12,
        SkinType::T3,
        SkinType::T4,
        SkinType::T56,
        SkinType::Unknown,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SkinType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkinType::T12 => "T12",
            SkinType::T3 => "T3",
            SkinType::T4 => "T4",
            SkinType::T56 => "T56",
            SkinType::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub id: u32,
    pub name: String,
    pub status: ConditionStatus,
    pub risk: RiskLevel,
    pub sample_count: usize,
}

/// Registry of conditions, partitioned into inliers and outliers by `n_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTable {
    pub n_min: usize,
    pub conditions: Vec<Condition>,
}

impl ConditionTable {
    /// Builds a table from raw conditions, deriving each status from `n_min`.
    pub fn from_counts(n_min: usize, conditions: Vec<Condition>) -> Result<Self> {
        let conditions = conditions
            .into_iter()
            .map(|mut c| {
                c.status = if c.sample_count >= n_min {
                    ConditionStatus::Inlier
                } else {
                    ConditionStatus::Outlier
                };
                c
            })
            .collect();
        let table = ConditionTable { n_min, conditions };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min == 0 {
            return Err(Error::InvalidInput("n_min must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.conditions {
            if !seen.insert(c.id) {
                return Err(Error::InvalidInput(format!("duplicate condition id {}", c.id)));
            }
            let expected = if c.sample_count >= self.n_min {
                ConditionStatus::Inlier
            } else {
                ConditionStatus::Outlier
            };
            if c.status != expected {
                return Err(Error::InvalidInput(format!(
                    "condition {} has {} samples but status {:?} (n_min = {})",
                    c.id, c.sample_count, c.status, self.n_min
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.id == id)
    }

    pub fn is_outlier(&self, id: u32) -> bool {
        self.get(id)
            .is_some_and(|c| c.status == ConditionStatus::Outlier)
    }

    /// Inlier ids in ascending order.
    pub fn inlier_ids(&self) -> Vec<u32> {
        self.ids_with(ConditionStatus::Inlier)
    }

    /// Outlier ids in ascending order.
    pub fn outlier_ids(&self) -> Vec<u32> {
        self.ids_with(ConditionStatus::Outlier)
    }

    fn ids_with(&self, status: ConditionStatus) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .conditions
            .iter()
            .filter(|c| c.status == status)
            .map(|c| c.id)
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// One case: a bag of 1 to 6 instance feature vectors sharing a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCase {
    pub case_id: u64,
    pub patient_id: u64,
    pub condition_id: u32,
    pub skin_type: SkinType,
    pub instances: Vec<Vec<f64>>,
}

impl LabeledCase {
    pub fn validate(&self) -> Result<usize> {
        let invalid = |reason: String| Error::InvalidCase {
            case_id: self.case_id,
            reason,
        };
        let Some(first) = self.instances.first() else {
            return Err(invalid("no instances".into()));
        };
        if self.instances.len() > MAX_INSTANCES {
            return Err(invalid(format!(
                "{} instances, at most {MAX_INSTANCES} allowed",
                self.instances.len()
            )));
        }
        let dim = first.len();
        if dim == 0 {
            return Err(invalid("zero-dimensional instance".into()));
        }
        if self.instances.iter().any(|v| v.len() != dim) {
            return Err(invalid("instances have differing dimensions".into()));
        }
        Ok(dim)
    }

    /// Average-pools the instance vectors into one case-level feature.
    pub fn feature(&self) -> Result<Vec<f64>> {
        case_feature(self)
    }
}

/// Arithmetic mean of the case's instance vectors.
pub fn case_feature(case: &LabeledCase) -> Result<Vec<f64>> {
    let dim = case.validate()?;
    let mut mean = vec![0.0; dim];
    for v in &case.instances {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = case.instances.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Cases together with their condition registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub table: ConditionTable,
    pub cases: Vec<LabeledCase>,
}

impl Dataset {
    /// Checks table invariants, case shapes, label references and that
    /// `sample_count` agrees with the cases. Returns the instance dimension.
    pub fn validate(&self) -> Result<usize> {
        self.table.validate()?;
        let mut dim = None;
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for case in &self.cases {
            let d = case.validate()?;
            if *dim.get_or_insert(d) != d {
                return Err(Error::InvalidCase {
                    case_id: case.case_id,
                    reason: format!("dimension {d} differs from dataset dimension"),
                });
            }
            if !ids.insert(case.case_id) {
                return Err(Error::InvalidInput(format!("duplicate case id {}", case.case_id)));
            }
            if self.table.get(case.condition_id).is_none() {
                return Err(Error::InvalidCase {
                    case_id: case.case_id,
                    reason: format!("unknown condition {}", case.condition_id),
                });
            }
            *counts.entry(case.condition_id).or_default() += 1;
        }
        for c in &self.table.conditions {
            let n = counts.get(&c.id).copied().unwrap_or(0);
            if n != c.sample_count {
                return Err(Error::InvalidInput(format!(
                    "condition {} declares {} samples but dataset has {n}",
                    c.id, c.sample_count
                )));
            }
        }
        dim.ok_or_else(|| Error::InvalidInput("dataset has no cases".into()))
    }

    pub fn case_index(&self) -> BTreeMap<u64, usize> {
        self.cases
            .iter()
            .enumerate()
            .map(|(i, c)| (c.case_id, i))
            .collect()
    }

    pub fn write_cases<W: Write>(&self, mut w: W) -> Result<()> {
        for case in &self.cases {
            serde_json::to_writer(&mut w, case)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_cases<R: BufRead>(r: R) -> Result<Vec<LabeledCase>> {
        let mut cases = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            cases.push(serde_json::from_str(&line)?);
        }
        Ok(cases)
    }
}

/// Ground truth for one scored case, aligned by position with a score set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseLabel {
    pub case_id: u64,
    pub condition_id: u32,
    pub is_outlier: bool,
    pub risk: RiskLevel,
    pub skin_type: SkinType,
}

impl Dataset {
    /// Labels for the given case ids, in the given order.
    pub fn labels_for(&self, case_ids: &[u64]) -> Result<Vec<CaseLabel>> {
        let index = self.case_index();
        case_ids
            .iter()
            .map(|id| {
                let case = index
                    .get(id)
                    .map(|&i| &self.cases[i])
                    .ok_or_else(|| Error::InvalidInput(format!("unknown case id {id}")))?;
                let cond = self.table.get(case.condition_id).ok_or(Error::UnknownLabel(case.condition_id))?;
                Ok(CaseLabel {
                    case_id: case.case_id,
                    condition_id: case.condition_id,
                    is_outlier: cond.status == ConditionStatus::Outlier,
                    risk: cond.risk,
                    skin_type: case.skin_type,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// Train/val/test partition of case ids plus the outlier-condition assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub outlier_assignment: BTreeMap<u32, SplitName>,
}

impl BenchmarkSplit {
    pub fn cases(&self, split: SplitName) -> &[u64] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Split membership of every case; `None` when a case is listed twice.
    pub fn membership(&self) -> Option<BTreeMap<u64, SplitName>> {
        let mut map = BTreeMap::new();
        for s in SplitName::ALL {
            for &id in self.cases(s) {
                if map.insert(id, s).is_some() {
                    return None;
                }
            }
        }
        Some(map)
    }

    /// Outlier condition ids assigned to `split`, ascending.
    pub fn outlier_conditions(&self, split: SplitName) -> Vec<u32> {
        self.outlier_assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(c, _)| *c)
            .collect()
    }
}

/// Softmax output over a head's class layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(pub Vec<f64>);

impl ProbabilityVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimplexViolation {
    Sum(f64),
    /// Entry at `index` is outside the open interval (0, 1).
    Boundary { index: usize, value: f64 },
    NonFinite { index: usize },
    Empty,
}

impl fmt::Display for SimplexViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimplexViolation::Sum(s) => write!(f, "sum={s}"),
            SimplexViolation::Boundary { index, value } => {
                write!(f, "entry {index} = {value} outside (0,1)")
            }
            SimplexViolation::NonFinite { index } => write!(f, "entry {index} is not finite"),
            SimplexViolation::Empty => f.write_str("empty vector"),
        }
    }
}

/// Reports every simplex violation of `p`: entries must lie in the open
/// interval (0, 1) and sum to one within [`SIMPLEX_TOLERANCE`].
pub fn validate_probability(p: &ProbabilityVector) -> std::result::Result<(), Vec<SimplexViolation>> {
    let mut violations = Vec::new();
    if p.is_empty() {
        violations.push(SimplexViolation::Empty);
        return Err(violations);
    }
    for (index, &value) in p.values().iter().enumerate() {
        if !value.is_finite() {
            violations.push(SimplexViolation::NonFinite { index });
        } else if value <= 0.0 || value >= 1.0 {
            violations.push(SimplexViolation::Boundary { index, value });
        }
    }
    let sum: f64 = p.values().iter().sum();
    if !((sum - 1.0).abs() <= SIMPLEX_TOLERANCE) {
        violations.push(SimplexViolation::Sum(sum));
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn case(instances: Vec<Vec<f64>>) -> LabeledCase {
        LabeledCase {
            case_id: 1,
            patient_id: 1,
            condition_id: 0,
            skin_type: SkinType::Unknown,
            instances,
        }
    }

    #[test]
    fn feature_of_single_instance_is_identity() {
        let v = vec![0.5, -1.25, 3.0];
        assert_eq!(case_feature(&case(vec![v.clone()])).unwrap(), v);
    }

    #[test]
    fn feature_is_mean() {
        let f = case_feature(&case(vec![vec![0.0, 2.0], vec![2.0, 0.0]])).unwrap();
        assert_eq!(f, vec![1.0, 1.0]);
        let f = case_feature(&case(vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]])).unwrap();
        assert_eq!(f, vec![2.0, 2.0]);
    }

    #[test]
    fn empty_case_is_invalid() {
        assert!(matches!(
            case_feature(&case(vec![])),
            Err(Error::InvalidCase { .. })
        ));
        assert!(case(vec![vec![1.0]; 7]).validate().is_err());
        assert!(case(vec![vec![1.0], vec![1.0, 2.0]]).validate().is_err());
    }

    #[test]
    fn probability_checks() {
        assert!(validate_probability(&ProbabilityVector(vec![0.5, 0.5])).is_ok());
        let v = validate_probability(&ProbabilityVector(vec![0.5, 0.6])).unwrap_err();
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], SimplexViolation::Sum(s) if (s - 1.1).abs() < 1e-12));
        let v = validate_probability(&ProbabilityVector(vec![1.0, 0.0])).unwrap_err();
        assert_eq!(
            v.iter()
                .filter(|x| matches!(x, SimplexViolation::Boundary { .. }))
                .count(),
            2
        );
    }

    #[test]
    fn table_status_follows_n_min() {
        let mk = |id, n| Condition {
            id,
            name: format!("c{id}"),
            status: ConditionStatus::Inlier,
            risk: RiskLevel::Low,
            sample_count: n,
        };
        let t = ConditionTable::from_counts(100, vec![mk(0, 150), mk(1, 100), mk(2, 99)]).unwrap();
        assert_eq!(t.inlier_ids(), vec![0, 1]);
        assert_eq!(t.outlier_ids(), vec![2]);
        let mut bad = t.clone();
        bad.conditions[2].status = ConditionStatus::Inlier;
        assert!(bad.validate().is_err());
        assert!(ConditionTable::from_counts(100, vec![mk(0, 1), mk(0, 2)]).is_err());
    }

    #[test]
    fn cases_roundtrip_jsonl() {
        let table = ConditionTable::from_counts(
            1,
            vec![Condition {
                id: 3,
                name: "x".into(),
                status: ConditionStatus::Inlier,
                risk: RiskLevel::High,
                sample_count: 1,
            }],
        )
        .unwrap();
        let mut c = case(vec![vec![0.25, -1.0]]);
        c.condition_id = 3;
        c.skin_type = SkinType::T56;
        let ds = Dataset { table, cases: vec![c] };
        ds.validate().unwrap();
        let mut buf = Vec::new();
        ds.write_cases(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"skin_type\":\"T56\""));
        let back = Dataset::read_cases(buf.as_slice()).unwrap();
        assert_eq!(back, ds.cases);
    }

    proptest! {
        #[test]
        fn feature_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..=6),
            rot in 0usize..6,
        ) {
            let a = case_feature(&case(rows.clone())).unwrap();
            let mut shuffled = rows.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let b = case_feature(&case(shuffled)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn feature_of_copies_is_the_vector(
            v in prop::collection::vec(-10.0f64..10.0, 1..8),
            k in 1usize..=6,
        ) {
            let f = case_feature(&case(vec![v.clone(); k])).unwrap();
            for (x, y) in f.iter().zip(&v) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
