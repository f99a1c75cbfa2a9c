//! OOD scores, confidences and top-1 predictions from trained heads, plus
//! the Mahalanobis baseline on a shared-covariance Gaussian bank.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, LossKind, Sample};

/// Ridge added to the pooled covariance.
pub const DEFAULT_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// Probability mass on the outlier block.
    Hod,
    /// One minus the maximum inlier probability.
    Msp,
}

impl Scorer {
    pub fn default_for(kind: LossKind) -> Self {
        if kind.has_outlier_block() {
            Scorer::Hod
        } else {
            Scorer::Msp
        }
    }
}

/// Top-1 decision: an inlier condition or the aggregated outlier class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Top1 {
    Inlier(u32),
    Out,
}

impl fmt::Display for Top1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Top1::Inlier(id) => write!(f, "{id}"),
            Top1::Out => f.write_str("OUT"),
        }
    }
}

impl std::str::FromStr for Top1 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "OUT" {
            return Ok(Top1::Out);
        }
        s.parse()
            .map(Top1::Inlier)
            .map_err(|_| Error::InvalidInput(format!("bad top1 value `{s}`")))
    }
}

impl Serialize for Top1 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Top1 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `ood_score` in [0,1] and `confidence = 1 - ood_score`.
    Probability,
    /// Unbounded distance score; `confidence = -ood_score`.
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub case_id: u64,
    pub ood_score: f64,
    pub confidence: f64,
    pub top1: Top1,
    /// One entry per inlier class of the owning score set; empty for
    /// distance scores.
    pub inlier_probs: Vec<f64>,
}

impl ScoreRow {
    /// Top-1 inlier prediction, ignoring the outlier class.
    pub fn inlier_prediction(&self, inlier_ids: &[u32]) -> Option<u32> {
        if self.inlier_probs.is_empty() {
            return match self.top1 {
                Top1::Inlier(id) => Some(id),
                Top1::Out => None,
            };
        }
        argmax_first(&self.inlier_probs).map(|i| inlier_ids[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub kind: ScoreKind,
    pub inlier_ids: Vec<u32>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn case_ids(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.case_id).collect()
    }

    /// Checks that `other` scores the same cases over the same inlier classes.
    pub fn check_aligned(&self, other: &ScoreSet) -> Result<()> {
        if self.inlier_ids != other.inlier_ids {
            return Err(Error::Alignment("inlier class lists differ".into()));
        }
        if self.rows.len() != other.rows.len() {
            return Err(Error::Alignment(format!(
                "{} vs {} cases",
                self.rows.len(),
                other.rows.len()
            )));
        }
        if let Some((a, b)) = self
            .rows
            .iter()
            .zip(&other.rows)
            .find(|(a, b)| a.case_id != b.case_id)
        {
            return Err(Error::Alignment(format!(
                "case {} vs {}",
                a.case_id, b.case_id
            )));
        }
        Ok(())
    }

    /// Writes `case_id, ood_score, confidence, top1, p_<id>...`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![
            "case_id".to_string(),
            "ood_score".into(),
            "confidence".into(),
            "top1".into(),
        ];
        if self.kind == ScoreKind::Probability {
            header.extend(self.inlier_ids.iter().map(|id| format!("p_{id}")));
        }
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.case_id.to_string(),
                r.ood_score.to_string(),
                r.confidence.to_string(),
                r.top1.to_string(),
            ];
            rec.extend(r.inlier_probs.iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<ScoreSet> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let inlier_ids = headers
            .iter()
            .skip(4)
            .map(|h| {
                h.strip_prefix("p_")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad score column `{h}`")))
            })
            .collect::<Result<Vec<u32>>>()?;
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidInput(format!("bad number `{s}`")))
        };
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).ok_or_else(|| Error::InvalidInput("short score row".into()));
            rows.push(ScoreRow {
                case_id: get(0)?
                    .parse()
                    .map_err(|_| Error::InvalidInput("bad case id".into()))?,
                ood_score: parse(get(1)?)?,
                confidence: parse(get(2)?)?,
                top1: get(3)?.parse()?,
                inlier_probs: (4..rec.len()).map(|i| parse(&rec[i])).collect::<Result<_>>()?,
            });
        }
        let kind = if inlier_ids.is_empty() {
            ScoreKind::Distance
        } else {
            ScoreKind::Probability
        };
        Ok(ScoreSet { kind, inlier_ids, rows })
    }
}

/// Index of the first maximum.
fn argmax_first(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

/// Argmax over the inlier probabilities and the OOD score. Inlier ids are
/// visited in ascending order, so ties go to the lowest inlier id and an
/// inlier-vs-OUT tie goes to the inlier.
pub fn top1_from(inlier_ids: &[u32], inlier_probs: &[f64], ood_score: f64) -> Top1 {
    let mut order: Vec<usize> = (0..inlier_ids.len()).collect();
    order.sort_by_key(|&i| inlier_ids[i]);
    let mut best: Option<(usize, f64)> = None;
    for i in order {
        if best.is_none_or(|(_, p)| inlier_probs[i] > p) {
            best = Some((i, inlier_probs[i]));
        }
    }
    match best {
        Some((i, p)) if p >= ood_score => Top1::Inlier(inlier_ids[i]),
        _ => Top1::Out,
    }
}

/// `U(x)`: total probability on the outlier block.
pub fn ood_score_hod(head: &ClassifierHead, feature: &[f64]) -> Result<f64> {
    if head.class_layout.outlier_block_len() == 0 {
        return Err(Error::WrongScorer(format!(
            "{} head has no outlier block",
            head.loss_kind
        )));
    }
    let probs = head.forward(feature)?.probs;
    let n_in = head.class_layout.num_inliers();
    Ok(probs.values()[n_in..].iter().sum())
}

/// One minus the maximum inlier probability, renormalized over the inlier
/// block when the head also has outlier outputs.
pub fn ood_score_msp(head: &ClassifierHead, feature: &[f64]) -> Result<f64> {
    let (probs, _) = inlier_distribution(head, feature, Scorer::Msp)?;
    Ok(1.0 - probs.iter().copied().fold(0.0, f64::max))
}

pub fn ood_score(scorer: Scorer, head: &ClassifierHead, feature: &[f64]) -> Result<f64> {
    match scorer {
        Scorer::Hod => ood_score_hod(head, feature),
        Scorer::Msp => ood_score_msp(head, feature),
    }
}

/// Per-inlier probabilities and the OOD score under `scorer`.
fn inlier_distribution(head: &ClassifierHead, feature: &[f64], scorer: Scorer) -> Result<(Vec<f64>, f64)> {
    let probs = head.forward(feature)?.probs.0;
    let n_in = head.class_layout.num_inliers();
    match scorer {
        Scorer::Hod => {
            if n_in == probs.len() {
                return Err(Error::WrongScorer(format!(
                    "{} head has no outlier block",
                    head.loss_kind
                )));
            }
            let u = probs[n_in..].iter().sum();
            Ok((probs[..n_in].to_vec(), u))
        }
        Scorer::Msp => {
            let mass: f64 = probs[..n_in].iter().sum();
            let inl: Vec<f64> = if n_in == probs.len() {
                probs
            } else {
                probs[..n_in].iter().map(|p| p / mass).collect()
            };
            let u = 1.0 - inl.iter().copied().fold(0.0, f64::max);
            Ok((inl, u))
        }
    }
}

/// Top-1 over the inlier classes plus the aggregated outlier class.
pub fn top1(head: &ClassifierHead, feature: &[f64]) -> Result<Top1> {
    let (inl, u) = inlier_distribution(head, feature, Scorer::default_for(head.loss_kind))?;
    Ok(top1_from(&head.class_layout.inliers, &inl, u))
}

/// Scores every sample with `scorer`.
pub fn score_head(head: &ClassifierHead, samples: &[Sample], scorer: Scorer) -> Result<ScoreSet> {
    let inlier_ids = head.class_layout.inliers.clone();
    let rows = samples
        .iter()
        .map(|s| {
            let (inl, u) = inlier_distribution(head, &s.feature, scorer)?;
            Ok(ScoreRow {
                case_id: s.case_id,
                ood_score: u,
                confidence: 1.0 - u,
                top1: top1_from(&inlier_ids, &inl, u),
                inlier_probs: inl,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet {
        kind: ScoreKind::Probability,
        inlier_ids,
        rows,
    })
}

/// Class-conditional Gaussians with one shared covariance.
#[derive(Debug, Clone)]
pub struct GaussianBank {
    pub class_ids: Vec<u32>,
    pub means: Vec<DVector<f64>>,
    pub covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
}

/// Fits per-class means and the pooled within-class covariance (normalized
/// by the sample count) plus `ridge * I`.
pub fn fit_gaussians(samples: &[(Vec<f64>, u32)], ridge: f64) -> Result<GaussianBank> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidInput("ridge must be non-negative".into()));
    }
    let dim = samples
        .first()
        .map(|(f, _)| f.len())
        .ok_or_else(|| Error::InvalidInput("no samples".into()))?;
    let mut groups: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for (f, c) in samples {
        if f.len() != dim {
            return Err(Error::InvalidInput("feature dimensions differ".into()));
        }
        groups.entry(*c).or_default().push(f);
    }
    if let Some((class, members)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::DegenerateClass {
            class: *class,
            count: members.len(),
        });
    }
    let mut scatter = DMatrix::<f64>::zeros(dim, dim);
    let mut class_ids = Vec::new();
    let mut means = Vec::new();
    for (class, members) in &groups {
        let mut mean = DVector::<f64>::zeros(dim);
        for f in members {
            mean += DVector::from_column_slice(f);
        }
        mean /= members.len() as f64;
        for f in members {
            let d = DVector::from_column_slice(f) - &mean;
            scatter.ger(1.0, &d, &d, 1.0);
        }
        class_ids.push(*class);
        means.push(mean);
    }
    let mut covariance = scatter / samples.len() as f64;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    for i in 0..dim {
        covariance[(i, i)] += ridge;
    }
    let precision = covariance
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("pooled covariance is not positive definite".into()))?
        .inverse();
    Ok(GaussianBank {
        class_ids,
        means,
        covariance,
        precision,
    })
}

impl GaussianBank {
    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// Squared Mahalanobis distance to every class mean.
    pub fn distances(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "feature has dimension {}, bank expects {}",
                feature.len(),
                self.dim()
            )));
        }
        let x = DVector::from_column_slice(feature);
        Ok(self
            .means
            .iter()
            .map(|m| {
                let d = &x - m;
                (d.transpose() * &self.precision * &d)[(0, 0)].max(0.0)
            })
            .collect())
    }
}

/// Minimum squared Mahalanobis distance over the class means.
pub fn ood_score_mahalanobis(bank: &GaussianBank, feature: &[f64]) -> Result<f64> {
    Ok(bank
        .distances(feature)?
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}

/// Mahalanobis score set; `top1` is the nearest class mean.
pub fn score_mahalanobis(bank: &GaussianBank, samples: &[Sample]) -> Result<ScoreSet> {
    let rows = samples
        .iter()
        .map(|s| {
            let d = bank.distances(&s.feature)?;
            let neg: Vec<f64> = d.iter().map(|v| -v).collect();
            let nearest = argmax_first(&neg).expect("bank has classes");
            let u = d[nearest];
            Ok(ScoreRow {
                case_id: s.case_id,
                ood_score: u,
                confidence: -u,
                top1: Top1::Inlier(bank.class_ids[nearest]),
                inlier_probs: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet {
        kind: ScoreKind::Distance,
        inlier_ids: bank.class_ids.clone(),
        rows,
    })
}
