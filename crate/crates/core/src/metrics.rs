//! Ranking and decision metrics for OOD detection.
//!
//! Outliers are the positive class for AUROC and FPR@TPR (higher OOD score
//! means "more outlier"); inliers are the positive class for AUPR-in.
//! A case is *predicted* when its confidence exceeds the threshold,
//! `C(x) > tau`, and abstained otherwise. Selective accuracy, outlier
//! recall and cost all use [`is_predicted`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{CaseLabel, RiskLevel, SkinType};
use crate::error::{Error, Result};
use crate::scoring::{ScoreKind, ScoreSet};

/// Number of evenly spaced thresholds in [0,1] used for curves.
pub const CURVE_GRID: usize = 101;

fn check_sides(inlier: &[f64], outlier: &[f64]) -> Result<()> {
    if inlier.is_empty() || outlier.is_empty() {
        return Err(Error::Undefined(format!(
            "need both inliers and outliers (got {} / {})",
            inlier.len(),
            outlier.len()
        )));
    }
    if inlier.iter().chain(outlier).any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    Ok(())
}

/// Scores tagged with their side, sorted ascending.
fn merged(inlier: &[f64], outlier: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = inlier
        .iter()
        .map(|&s| (s, false))
        .chain(outlier.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    all
}

/// Runs of equal scores as `(inlier count, outlier count)`, ascending.
fn tie_blocks(sorted: &[(f64, bool)]) -> Vec<(f64, usize, usize)> {
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    for &(s, out) in sorted {
        match blocks.last_mut() {
            Some((v, i, o)) if *v == s => {
                if out {
                    *o += 1
                } else {
                    *i += 1
                }
            }
            _ => blocks.push((s, usize::from(!out), usize::from(out))),
        }
    }
    blocks
}

/// Mann-Whitney estimate of `P(U_out > U_in) + P(U_out = U_in) / 2`.
pub fn auroc(inlier: &[f64], outlier: &[f64]) -> Result<f64> {
    check_sides(inlier, outlier)?;
    // twice the number of winning pairs plus ties, kept exact in integers
    let mut doubled: u128 = 0;
    let mut inliers_below: u128 = 0;
    for (_, i, o) in tie_blocks(&merged(inlier, outlier)) {
        doubled += 2 * o as u128 * inliers_below + (o as u128) * (i as u128);
        inliers_below += i as u128;
    }
    Ok(doubled as f64 / (2 * inlier.len() as u128 * outlier.len() as u128) as f64)
}

/// FPR at the largest threshold `t` whose rule `U >= t` reaches
/// `TPR >= tpr_target` on the outliers.
pub fn fpr_at_tpr(inlier: &[f64], outlier: &[f64], tpr_target: f64) -> Result<f64> {
    check_sides(inlier, outlier)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidInput(format!("tpr target {tpr_target} outside (0,1]")));
    }
    let mut desc = outlier.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let n = desc.len();
    let k = (1..=n)
        .find(|&k| k as f64 / n as f64 >= tpr_target)
        .unwrap_or(n);
    let threshold = desc[k - 1];
    let false_pos = inlier.iter().filter(|&&s| s >= threshold).count();
    Ok(false_pos as f64 / inlier.len() as f64)
}

/// Average precision with inliers as positives, ranked by ascending OOD
/// score; tied scores enter the sweep as one block.
pub fn aupr_in(inlier: &[f64], outlier: &[f64]) -> Result<f64> {
    check_sides(inlier, outlier)?;
    let n_pos = inlier.len();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    for (_, i, o) in tie_blocks(&merged(inlier, outlier)) {
        tp += i;
        fp += o;
        if i > 0 {
            ap += (i as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// ROC points `(fpr, tpr)` from the strictest threshold to the loosest.
pub fn roc_curve(inlier: &[f64], outlier: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_sides(inlier, outlier)?;
    let (ni, no) = (inlier.len() as f64, outlier.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    for (_, i, o) in tie_blocks(&merged(inlier, outlier)).into_iter().rev() {
        fp += i;
        tp += o;
        points.push((fp as f64 / ni, tp as f64 / no));
    }
    Ok(points)
}

fn check_labels(scores: &ScoreSet, labels: &[CaseLabel]) -> Result<()> {
    if scores.rows.len() != labels.len() {
        return Err(Error::Alignment(format!(
            "{} scores vs {} labels",
            scores.rows.len(),
            labels.len()
        )));
    }
    if let Some((r, l)) = scores
        .rows
        .iter()
        .zip(labels)
        .find(|(r, l)| r.case_id != l.case_id)
    {
        return Err(Error::Alignment(format!("case {} vs label {}", r.case_id, l.case_id)));
    }
    Ok(())
}

/// OOD scores split by ground truth.
pub fn split_scores(scores: &ScoreSet, labels: &[CaseLabel]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_labels(scores, labels)?;
    let mut inl = Vec::new();
    let mut out = Vec::new();
    for (r, l) in scores.rows.iter().zip(labels) {
        if l.is_outlier {
            out.push(r.ood_score);
        } else {
            inl.push(r.ood_score);
        }
    }
    Ok((inl, out))
}

/// Top-1 inlier accuracy over the inlier cases only.
pub fn inlier_accuracy(scores: &ScoreSet, labels: &[CaseLabel]) -> Result<f64> {
    check_labels(scores, labels)?;
    let mut n = 0usize;
    let mut correct = 0usize;
    for (r, l) in scores.rows.iter().zip(labels) {
        if l.is_outlier {
            continue;
        }
        n += 1;
        if r.inlier_prediction(&scores.inlier_ids) == Some(l.condition_id) {
            correct += 1;
        }
    }
    if n == 0 {
        return Err(Error::Undefined("no inlier cases".into()));
    }
    Ok(correct as f64 / n as f64)
}

/// The shared threshold predicate: predict when `C(x) > tau`.
pub fn is_predicted(confidence: f64, tau: f64) -> bool {
    confidence > tau
}

/// Accuracy over predicted cases; predicted outliers count as wrong.
pub fn selective_accuracy(scores: &ScoreSet, labels: &[CaseLabel], tau: f64) -> Result<f64> {
    check_labels(scores, labels)?;
    let mut predicted = 0usize;
    let mut correct = 0usize;
    for (r, l) in scores.rows.iter().zip(labels) {
        if !is_predicted(r.confidence, tau) {
            continue;
        }
        predicted += 1;
        if !l.is_outlier && r.inlier_prediction(&scores.inlier_ids) == Some(l.condition_id) {
            correct += 1;
        }
    }
    if predicted == 0 {
        return Err(Error::Undefined(format!("no case has confidence above {tau}")));
    }
    Ok(correct as f64 / predicted as f64)
}

/// Fraction of outlier cases abstained at `tau`.
pub fn outlier_recall(scores: &ScoreSet, labels: &[CaseLabel], tau: f64) -> Result<f64> {
    check_labels(scores, labels)?;
    let (n, abstained) = scores
        .rows
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.is_outlier)
        .fold((0usize, 0usize), |(n, a), (r, _)| {
            (n + 1, a + usize::from(!is_predicted(r.confidence, tau)))
        });
    if n == 0 {
        return Err(Error::Undefined("no outlier cases".into()));
    }
    Ok(abstained as f64 / n as f64)
}

/// Costs of each prediction outcome for the trust analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostMatrix {
    pub correct_inlier: f64,
    pub wrong_inlier: f64,
    pub abstain_inlier: f64,
    pub predict_outlier_as_inlier: f64,
    pub abstain_outlier: f64,
}

impl Default for CostMatrix {
    fn default() -> Self {
        CostMatrix {
            correct_inlier: 0.0,
            wrong_inlier: 1.0,
            abstain_inlier: 0.5,
            predict_outlier_as_inlier: 1.0,
            abstain_outlier: 0.0,
        }
    }
}

impl CostMatrix {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.correct_inlier,
            self.wrong_inlier,
            self.abstain_inlier,
            self.predict_outlier_as_inlier,
            self.abstain_outlier,
        ];
        if all.iter().all(|c| *c >= 0.0 && c.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("cost entries must be non-negative".into()))
        }
    }
}

/// Mean per-case cost at threshold `tau`.
pub fn cost(scores: &ScoreSet, labels: &[CaseLabel], tau: f64, cm: &CostMatrix) -> Result<f64> {
    check_labels(scores, labels)?;
    cm.validate()?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scores
        .rows
        .iter()
        .zip(labels)
        .map(|(r, l)| match (l.is_outlier, is_predicted(r.confidence, tau)) {
            (true, true) => cm.predict_outlier_as_inlier,
            (true, false) => cm.abstain_outlier,
            (false, false) => cm.abstain_inlier,
            (false, true) if r.inlier_prediction(&scores.inlier_ids) == Some(l.condition_id) => {
                cm.correct_inlier
            }
            (false, true) => cm.wrong_inlier,
        })
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub outlier_recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub cost: f64,
}

/// Selective-prediction curves at 101 evenly spaced thresholds in [0,1]
/// plus every distinct observed confidence.
pub fn threshold_curve(scores: &ScoreSet, labels: &[CaseLabel], cm: &CostMatrix) -> Result<Vec<CurvePoint>> {
    check_labels(scores, labels)?;
    let mut taus: Vec<f64> = (0..CURVE_GRID)
        .map(|i| i as f64 / (CURVE_GRID - 1) as f64)
        .chain(scores.rows.iter().map(|r| r.confidence))
        .filter(|t| t.is_finite())
        .collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    taus.into_iter()
        .map(|tau| {
            Ok(CurvePoint {
                tau,
                outlier_recall: outlier_recall(scores, labels, tau).ok(),
                accuracy: selective_accuracy(scores, labels, tau).ok(),
                cost: cost(scores, labels, tau, cm)?,
            })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["tau", "outlier_recall", "accuracy", "cost"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        out.write_record([
            p.tau.to_string(),
            opt(p.outlier_recall),
            opt(p.accuracy),
            p.cost.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub fpr_at_95_tpr: f64,
    pub aupr_in: f64,
    pub inlier_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub roc: Option<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub curve: Option<Vec<CurvePoint>>,
}

impl MetricReport {
    /// Mean of AUROC, 1 - FPR@95%TPR and AUPR-in.
    pub fn ood_criterion(&self) -> f64 {
        (self.auroc + (1.0 - self.fpr_at_95_tpr) + self.aupr_in) / 3.0
    }
}

/// The three OOD metrics plus inlier accuracy.
pub fn evaluate(scores: &ScoreSet, labels: &[CaseLabel]) -> Result<MetricReport> {
    let (inl, out) = split_scores(scores, labels)?;
    Ok(MetricReport {
        auroc: auroc(&inl, &out)?,
        fpr_at_95_tpr: fpr_at_tpr(&inl, &out, 0.95)?,
        aupr_in: aupr_in(&inl, &out)?,
        inlier_accuracy: inlier_accuracy(scores, labels)?,
        roc: None,
        curve: None,
    })
}

/// [`evaluate`] plus the ROC curve and, for probability scores, the
/// threshold curve.
pub fn evaluate_with_curves(scores: &ScoreSet, labels: &[CaseLabel], cm: &CostMatrix) -> Result<MetricReport> {
    let mut report = evaluate(scores, labels)?;
    let (inl, out) = split_scores(scores, labels)?;
    report.roc = Some(roc_curve(&inl, &out)?);
    if scores.kind == ScoreKind::Probability {
        report.curve = Some(threshold_curve(scores, labels, cm)?);
    }
    Ok(report)
}

/// Mean of AUROC, 1 - FPR@95%TPR and AUPR-in computed from raw scores.
pub fn ood_criterion(inlier: &[f64], outlier: &[f64]) -> Result<f64> {
    Ok((auroc(inlier, outlier)? + (1.0 - fpr_at_tpr(inlier, outlier, 0.95)?) + aupr_in(inlier, outlier)?) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupBy {
    /// Outliers grouped by risk; every row uses the full inlier set.
    Risk,
    /// Inliers and outliers both restricted to the skin-type group.
    SkinType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub group: String,
    pub inliers: usize,
    pub outliers: usize,
    /// `None` when either side of the group is empty.
    pub auroc: Option<f64>,
}

pub fn subgroup_report(scores: &ScoreSet, labels: &[CaseLabel], by: SubgroupBy) -> Result<Vec<SubgroupRow>> {
    check_labels(scores, labels)?;
    let pairs: Vec<(f64, &CaseLabel)> = scores.rows.iter().map(|r| r.ood_score).zip(labels).collect();
    let row = |group: String, keep_in: &dyn Fn(&CaseLabel) -> bool, keep_out: &dyn Fn(&CaseLabel) -> bool| {
        let inl: Vec<f64> = pairs
            .iter()
            .filter(|(_, l)| !l.is_outlier && keep_in(l))
            .map(|(s, _)| *s)
            .collect();
        let out: Vec<f64> = pairs
            .iter()
            .filter(|(_, l)| l.is_outlier && keep_out(l))
            .map(|(s, _)| *s)
            .collect();
        SubgroupRow {
            group,
            inliers: inl.len(),
            outliers: out.len(),
            auroc: auroc(&inl, &out).ok(),
        }
    };
    Ok(match by {
        SubgroupBy::Risk => [RiskLevel::High, RiskLevel::Medium, RiskLevel::Low]
            .into_iter()
            .map(|risk| row(format!("{risk} risk"), &|_| true, &|l| l.risk == risk))
            .collect(),
        SubgroupBy::SkinType => SkinType::ALL
            .into_iter()
            .filter(|s| *s != SkinType::Unknown)
            .map(|skin| {
                let keep = |l: &CaseLabel| l.skin_type == skin;
                row(format!("skin {skin}"), &keep, &keep)
            })
            .collect(),
    })
}

pub fn write_subgroup_csv<W: Write>(rows: &[SubgroupRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["group", "inliers", "outliers", "auroc"])?;
    for r in rows {
        out.write_record([
            r.group.clone(),
            r.inliers.to_string(),
            r.outliers.to_string(),
            r.auroc.map(|a| a.to_string()).unwrap_or_else(|| "undefined".into()),
        ])?;
    }
    out.flush()?;
    Ok(())
}
