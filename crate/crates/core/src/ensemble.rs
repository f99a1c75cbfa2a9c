//! Probability averaging, pairwise diversity, Ward clustering of a model
//! pool and greedy selection of a fixed-size ensemble with replacement.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::CaseLabel;
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, LossKind};
use crate::metrics::{ood_criterion, split_scores};
use crate::scoring::{top1_from, ScoreKind, ScoreRow, ScoreSet};

pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTag {
    pub view_id: u32,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{}-{}-s{}", self.view_id, self.loss_kind, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct PoolMember {
    pub tag: ModelTag,
    pub head: ClassifierHead,
    pub val: ScoreSet,
    pub test: ScoreSet,
}

/// Trained heads scored on identical validation and test orderings.
#[derive(Debug, Clone, Default)]
pub struct ModelPool {
    pub members: Vec<PoolMember>,
}

impl ModelPool {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn check_aligned(&self) -> Result<()> {
        if let Some(first) = self.members.first() {
            for m in &self.members[1..] {
                first.val.check_aligned(&m.val)?;
                first.test.check_aligned(&m.test)?;
            }
        }
        Ok(())
    }

    pub fn val_scores(&self) -> Vec<&ScoreSet> {
        self.members.iter().map(|m| &m.val).collect()
    }

    pub fn test_scores(&self) -> Vec<&ScoreSet> {
        self.members.iter().map(|m| &m.test).collect()
    }
}

/// Mean as `x0 + sum(x - x0) / n`, exact when all values are equal.
fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let Some(x0) = it.next() else { return f64::NAN };
    let n = 1 + it.clone().count();
    x0 + it.map(|x| x - x0).sum::<f64>() / n as f64
}

/// Averages member OOD scores and inlier probabilities case by case.
pub fn average_scores(members: &[&ScoreSet]) -> Result<ScoreSet> {
    let first = *members
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average zero score sets".into()))?;
    if first.kind != ScoreKind::Probability {
        return Err(Error::InvalidInput("only probability scores can be averaged".into()));
    }
    for m in &members[1..] {
        first.check_aligned(m)?;
        if m.kind != ScoreKind::Probability {
            return Err(Error::InvalidInput("only probability scores can be averaged".into()));
        }
    }
    let rows = (0..first.len())
        .map(|i| {
            let u = mean(members.iter().map(|m| m.rows[i].ood_score));
            let probs: Vec<f64> = (0..first.inlier_ids.len())
                .map(|c| mean(members.iter().map(|m| m.rows[i].inlier_probs[c])))
                .collect();
            ScoreRow {
                case_id: first.rows[i].case_id,
                ood_score: u,
                confidence: 1.0 - u,
                top1: top1_from(&first.inlier_ids, &probs, u),
                inlier_probs: probs,
            }
        })
        .collect();
    Ok(ScoreSet {
        kind: ScoreKind::Probability,
        inlier_ids: first.inlier_ids.clone(),
        rows,
    })
}

/// Fraction of cases on which the two top-1 predictions differ.
pub fn diversity(a: &ScoreSet, b: &ScoreSet) -> Result<f64> {
    a.check_aligned(b)?;
    if a.is_empty() {
        return Err(Error::Undefined("diversity over zero cases".into()));
    }
    let agree = a.rows.iter().zip(&b.rows).filter(|(x, y)| x.top1 == y.top1).count();
    Ok(1.0 - agree as f64 / a.len() as f64)
}

pub fn diversity_matrix(members: &[&ScoreSet]) -> Result<Vec<Vec<f64>>> {
    if members.len() < 2 {
        return Err(Error::InvalidInput("diversity matrix needs at least two models".into()));
    }
    let n = members.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = diversity(members[i], members[j])?;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

/// Writes the matrix with a `model` column and one column per label.
pub fn write_matrix_csv<W: Write>(labels: &[String], matrix: &[Vec<f64>], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["model".to_string()];
    header.extend(labels.iter().cloned());
    out.write_record(&header)?;
    for (label, row) in labels.iter().zip(matrix) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// One agglomeration step. Leaves are `0..n`; the cluster formed at step
/// `s` gets id `n + s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

fn check_matrix(m: &[Vec<f64>]) -> Result<()> {
    let n = m.len();
    for (i, row) in m.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidMatrix(format!("row {i} has {} entries, expected {n}", row.len())));
        }
        if row[i] != 0.0 {
            return Err(Error::InvalidMatrix(format!("diagonal entry {i} is {}", row[i])));
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidMatrix(format!("entry ({i},{j}) = {v}")));
            }
            if *v != m[j][i] {
                return Err(Error::InvalidMatrix(format!("entry ({i},{j}) differs from ({j},{i})")));
            }
        }
    }
    Ok(())
}

/// Ward agglomerative clustering of a distance matrix, using the
/// Lance-Williams update on squared distances. Heights are distances, so
/// two points at distance `d` merge at height `d`.
pub fn ward_dendrogram(matrix: &[Vec<f64>]) -> Result<Dendrogram> {
    check_matrix(matrix)?;
    let n = matrix.len();
    // active clusters: (id, size); squared distances indexed by slot
    let mut ids: Vec<usize> = (0..n).collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut d2: Vec<Vec<f64>> = matrix.iter().map(|r| r.iter().map(|v| v * v).collect()).collect();
    let mut alive = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if alive[j] && best.is_none_or(|(_, _, b)| d2[i][j] < b) {
                    best = Some((i, j, d2[i][j]));
                }
            }
        }
        let (i, j, dij) = best.expect("at least two active clusters");
        let (ni, nj) = (sizes[i] as f64, sizes[j] as f64);
        for k in 0..n {
            if !alive[k] || k == i || k == j {
                continue;
            }
            let nk = sizes[k] as f64;
            let v = ((ni + nk) * d2[k][i] + (nj + nk) * d2[k][j] - nk * dij) / (ni + nj + nk);
            d2[k][i] = v;
            d2[i][k] = v;
        }
        let height = dij.max(0.0).sqrt();
        if let Some(prev) = merges.last().map(|m: &Merge| m.height) {
            if height < prev {
                log::warn!("ward merge {step} at height {height} below previous {prev}");
            }
        }
        let (a, b) = (ids[i].min(ids[j]), ids[i].max(ids[j]));
        merges.push(Merge {
            left: a,
            right: b,
            height,
            size: sizes[i] + sizes[j],
        });
        sizes[i] += sizes[j];
        ids[i] = n + step;
        alive[j] = false;
    }
    Ok(Dendrogram { leaves: n, merges })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSelection {
    pub size: usize,
    /// Selected pool indices, sorted, with repetition.
    pub member_ids: Vec<usize>,
    /// Pool indices in the order they were picked.
    pub order: Vec<usize>,
    pub per_step_criterion: Vec<f64>,
}

/// Validation criterion of averaging the given OOD scores.
fn criterion_of(u: &[f64], is_outlier: &[bool]) -> Result<f64> {
    let mut inl = Vec::new();
    let mut out = Vec::new();
    for (v, o) in u.iter().zip(is_outlier) {
        if *o {
            out.push(*v);
        } else {
            inl.push(*v);
        }
    }
    ood_criterion(&inl, &out)
}

/// Mean of AUROC, 1 - FPR@95%TPR and AUPR-in for one score set.
pub fn selection_criterion(scores: &ScoreSet, labels: &[CaseLabel]) -> Result<f64> {
    let (inl, out) = split_scores(scores, labels)?;
    ood_criterion(&inl, &out)
}

/// Grows an ensemble one model at a time, with replacement, picking the
/// candidate whose addition maximizes the validation criterion. Ties go to
/// the lowest pool index.
pub fn greedy_select(pool_val: &[&ScoreSet], labels: &[CaseLabel], size: usize) -> Result<EnsembleSelection> {
    let first = *pool_val
        .first()
        .ok_or_else(|| Error::InvalidInput("empty model pool".into()))?;
    if size == 0 {
        return Err(Error::InvalidInput("ensemble size must be at least 1".into()));
    }
    for m in &pool_val[1..] {
        first.check_aligned(m)?;
    }
    // validates labels against the case order once
    split_scores(first, labels)?;
    let is_outlier: Vec<bool> = labels.iter().map(|l| l.is_outlier).collect();

    let mut order: Vec<usize> = Vec::with_capacity(size);
    let mut per_step = Vec::with_capacity(size);
    for _ in 0..size {
        let scores: Vec<f64> = pool_val
            .par_iter()
            .map(|cand| {
                let u: Vec<f64> = (0..first.len())
                    .map(|i| {
                        let chosen = order.iter().map(|&m| pool_val[m].rows[i].ood_score);
                        mean(chosen.chain(std::iter::once(cand.rows[i].ood_score)))
                    })
                    .collect();
                criterion_of(&u, &is_outlier)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut best = 0;
        for (i, v) in scores.iter().enumerate() {
            if *v > scores[best] {
                best = i;
            }
        }
        order.push(best);
        per_step.push(scores[best]);
    }
    let mut member_ids = order.clone();
    member_ids.sort_unstable();
    Ok(EnsembleSelection {
        size,
        member_ids,
        order,
        per_step_criterion: per_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RiskLevel, SkinType};
    use crate::scoring::Top1;

    fn set(us: &[f64]) -> ScoreSet {
        ScoreSet {
            kind: ScoreKind::Probability,
            inlier_ids: vec![0],
            rows: us
                .iter()
                .enumerate()
                .map(|(i, &u)| ScoreRow {
                    case_id: i as u64,
                    ood_score: u,
                    confidence: 1.0 - u,
                    top1: top1_from(&[0], &[1.0 - u], u),
                    inlier_probs: vec![1.0 - u],
                })
                .collect(),
        }
    }

    fn labels(outlier: &[bool]) -> Vec<CaseLabel> {
        outlier
            .iter()
            .enumerate()
            .map(|(i, &o)| CaseLabel {
                case_id: i as u64,
                condition_id: if o { 9 } else { 0 },
                is_outlier: o,
                risk: RiskLevel::Low,
                skin_type: SkinType::T3,
            })
            .collect()
    }

    #[test]
    fn averaging() {
        let a = set(&[0.2]);
        let b = set(&[0.6]);
        let avg = average_scores(&[&a, &b]).unwrap();
        assert!((avg.rows[0].ood_score - 0.4).abs() < 1e-15);
        assert_eq!(average_scores(&[&a]).unwrap(), a);
        assert_eq!(average_scores(&[&a, &a, &a]).unwrap(), a);
        let mut c = set(&[0.2, 0.3]);
        assert!(matches!(average_scores(&[&a, &c]), Err(Error::Alignment(_))));
        c.rows.truncate(1);
        c.rows[0].case_id = 5;
        assert!(matches!(average_scores(&[&a, &c]), Err(Error::Alignment(_))));
    }

    #[test]
    fn diversity_hand_count() {
        let a = set(&[0.1, 0.1, 0.1, 0.1]);
        let mut b = a.clone();
        b.rows[3].top1 = Top1::Out;
        assert_eq!(diversity(&a, &b).unwrap(), 0.25);
        assert_eq!(diversity(&a, &a).unwrap(), 0.0);
        let c = set(&[0.9, 0.9, 0.9, 0.9]);
        assert_eq!(diversity(&a, &c).unwrap(), 1.0);
        let m = diversity_matrix(&[&a, &b, &c]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
    }

    #[test]
    fn ward_two_points_and_pairs() {
        let d = ward_dendrogram(&[vec![0.0, 3.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(d.merges, vec![Merge { left: 0, right: 1, height: 3.0, size: 2 }]);

        // {0,1} and {2,3} are tight pairs, 10 apart
        let m = vec![
            vec![0.0, 1.0, 10.0, 10.0],
            vec![1.0, 0.0, 10.0, 10.0],
            vec![10.0, 10.0, 0.0, 2.0],
            vec![10.0, 10.0, 2.0, 0.0],
        ];
        let d = ward_dendrogram(&m).unwrap();
        assert_eq!((d.merges[0].left, d.merges[0].right), (0, 1));
        assert_eq!((d.merges[1].left, d.merges[1].right), (2, 3));
        assert_eq!((d.merges[2].left, d.merges[2].right, d.merges[2].size), (4, 5, 4));
        // Lance-Williams by hand: d2(2,{0,1}) = (2*100 + 2*100 - 1)/3 = 133; then
        // d2({2,3},{0,1}) = (3*133 + 3*133 - 2*4)/4 = 197.5
        assert!((d.merges[2].height - 197.5f64.sqrt()).abs() < 1e-12);

        let bad = vec![vec![0.0, 1.0], vec![2.0, 0.0]];
        assert!(matches!(ward_dendrogram(&bad), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn greedy_identical_pool_repeats_model_zero() {
        let a = set(&[0.1, 0.2, 0.8, 0.7]);
        let lab = labels(&[false, false, true, true]);
        let sel = greedy_select(&[&a, &a, &a], &lab, 3).unwrap();
        assert_eq!(sel.order, vec![0, 0, 0]);
        assert_eq!(sel.per_step_criterion.len(), 3);
    }

    #[test]
    fn greedy_first_step_is_best_single_model() {
        let lab = labels(&[false, false, true, true]);
        let weak = set(&[0.5, 0.9, 0.1, 0.6]);
        let strong = set(&[0.1, 0.2, 0.8, 0.7]);
        let sel = greedy_select(&[&weak, &strong], &lab, 1).unwrap();
        assert_eq!(sel.order, vec![1]);
        assert_eq!(sel.per_step_criterion[0], selection_criterion(&strong, &lab).unwrap());
    }
}
