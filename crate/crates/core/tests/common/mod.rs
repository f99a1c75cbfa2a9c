#![allow(dead_code)]

//! Brute-force oracles and random fixtures shared by the integration tests.

use hodbench::domain::{CaseLabel, RiskLevel, SkinType};
use hodbench::scoring::{ScoreKind, ScoreRow, ScoreSet, Top1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scores on a coarse grid so that ties are common.
pub fn tied_scores(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels)).collect()
}

/// Pairwise count: P(out > in) + P(out = in) / 2.
pub fn auroc_oracle(inl: &[f64], out: &[f64]) -> f64 {
    let mut doubled = 0u128;
    for o in out {
        for i in inl {
            doubled += if o > i {
                2
            } else if o == i {
                1
            } else {
                0
            };
        }
    }
    doubled as f64 / (2 * inl.len() as u128 * out.len() as u128) as f64
}

/// Tries every observed score as threshold for the rule `U >= t` and keeps
/// the largest one whose outlier recall reaches the target.
pub fn fpr_oracle(inl: &[f64], out: &[f64], target: f64) -> f64 {
    let mut best: Option<f64> = None;
    for &t in inl.iter().chain(out) {
        let tpr = out.iter().filter(|&&o| o >= t).count() as f64 / out.len() as f64;
        if tpr >= target && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the smallest score always reaches full recall");
    inl.iter().filter(|&&i| i >= t).count() as f64 / inl.len() as f64
}

/// Average precision with inliers positive: for each distinct threshold t
/// in ascending order, the rule `U <= t` contributes recall gain times
/// precision, both counted from scratch.
pub fn aupr_in_oracle(inl: &[f64], out: &[f64]) -> f64 {
    let mut ts: Vec<f64> = inl.iter().chain(out).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut ap = 0.0;
    for t in ts {
        let gained = inl.iter().filter(|&&i| i == t).count();
        if gained == 0 {
            continue;
        }
        let tp = inl.iter().filter(|&&i| i <= t).count();
        let fp = out.iter().filter(|&&o| o <= t).count();
        ap += (gained as f64 / inl.len() as f64) * (tp as f64 / (tp + fp) as f64);
    }
    ap
}

pub fn label(case_id: u64, condition_id: u32, is_outlier: bool) -> CaseLabel {
    CaseLabel {
        case_id,
        condition_id,
        is_outlier,
        risk: RiskLevel::Low,
        skin_type: SkinType::Unknown,
    }
}

/// A probability score set over `k` inliers with random simplex rows,
/// `n` cases of which roughly `outlier_share` are outliers.
pub fn random_scoreset(rng: &mut ChaCha8Rng, n: usize, k: usize, outlier_share: f64) -> (ScoreSet, Vec<CaseLabel>) {
    let inlier_ids: Vec<u32> = (0..k as u32).collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n as u64 {
        let raw: Vec<f64> = (0..=k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let u = raw[k] / total;
        let inlier_probs: Vec<f64> = raw[..k].iter().map(|x| x / total).collect();
        let best = (0..k).fold(0, |b, i| if inlier_probs[i] > inlier_probs[b] { i } else { b });
        rows.push(ScoreRow {
            case_id: c,
            ood_score: u,
            confidence: 1.0 - u,
            top1: if u > inlier_probs[best] { Top1::Out } else { Top1::Inlier(best as u32) },
            inlier_probs,
        });
        let outlier = rng.random_bool(outlier_share);
        labels.push(label(c, if outlier { 100 } else { rng.random_range(0..k as u32) }, outlier));
    }
    let set = ScoreSet {
        kind: ScoreKind::Probability,
        inlier_ids,
        rows,
    };
    (set, labels)
}

/// Inlier prediction by first maximum of the inlier probabilities.
pub fn predicted_inlier(row: &ScoreRow, inlier_ids: &[u32]) -> u32 {
    let p = &row.inlier_probs;
    let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
    inlier_ids[best]
}

/// Criterion of an ensemble given as member indices with multiplicity,
/// computed from the averaged OOD scores with the oracles above.
pub fn ensemble_criterion_oracle(pool: &[&ScoreSet], labels: &[CaseLabel], members: &[usize]) -> f64 {
    let mut inl = Vec::new();
    let mut out = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let vals: Vec<f64> = members.iter().map(|&m| pool[m].rows[i].ood_score).collect();
        let x0 = vals[0];
        let u = x0 + vals.iter().map(|v| v - x0).sum::<f64>() / vals.len() as f64;
        if l.is_outlier {
            out.push(u);
        } else {
            inl.push(u);
        }
    }
    (auroc_oracle(&inl, &out) + (1.0 - fpr_oracle(&inl, &out, 0.95)) + aupr_in_oracle(&inl, &out)) / 3.0
}

/// All multisets of `size` indices from `0..n`, as non-decreasing vectors.
pub fn multisets(n: usize, size: usize) -> Vec<Vec<usize>> {
    if size == 0 {
        return vec![vec![]];
    }
    let mut all = Vec::new();
    for rest in multisets(n, size - 1) {
        let lo = rest.last().copied().unwrap_or(0);
        for i in lo..n {
            let mut m = rest.clone();
            m.push(i);
            all.push(m);
        }
    }
    all
}

/// Greedy-consistent exhaustive search: at each size, the best multiset
/// among all multisets that extend the previous step's choice, ties to the
/// smallest newly added index.
pub fn greedy_by_enumeration(pool: &[&ScoreSet], labels: &[CaseLabel], size: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for step in 1..=size {
        let mut best: Option<(f64, usize, Vec<usize>)> = None;
        for m in multisets(pool.len(), step) {
            let mut rest = m.clone();
            let mut ok = true;
            for c in &chosen {
                match rest.iter().position(|x| x == c) {
                    Some(p) => {
                        rest.remove(p);
                    }
                    None => ok = false,
                }
            }
            if !ok {
                continue;
            }
            let added = rest[0];
            let v = ensemble_criterion_oracle(pool, labels, &[chosen.clone(), vec![added]].concat());
            if best.as_ref().is_none_or(|(bv, bi, _)| v > *bv || (v == *bv && added < *bi)) {
                best = Some((v, added, m));
            }
        }
        chosen.push(best.expect("pool is non-empty").1);
    }
    chosen
}
