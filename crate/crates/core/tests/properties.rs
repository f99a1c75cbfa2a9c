mod common;

use common::*;
use hodbench::domain::{case_feature, LabeledCase, ProbabilityVector, SkinType, SIMPLEX_TOLERANCE};
use hodbench::ensemble::{average_scores, diversity, greedy_select, selection_criterion, ward_dendrogram};
use hodbench::heads::{
    head_loss, hod_loss, softmax, train_head, ClassLayout, ClassifierHead, LossKind, Sample, TrainConfig,
};
use hodbench::metrics::{aupr_in, auroc, fpr_at_tpr};
use hodbench::scoring::{fit_gaussians, ood_score_mahalanobis, score_head, top1, Scorer, ScoreSet};
use proptest::prelude::*;

fn case(instances: Vec<Vec<f64>>) -> LabeledCase {
    LabeledCase {
        case_id: 0,
        patient_id: 0,
        condition_id: 0,
        skin_type: SkinType::Unknown,
        instances,
    }
}

fn head_from(kind: LossKind, params: &[f64], dim: usize) -> ClassifierHead {
    let layout = match kind {
        LossKind::CeInlierOnly | LossKind::Oe => ClassLayout::inlier_only(vec![0, 1, 2]),
        LossKind::RejectBucket => ClassLayout::reject(vec![0, 1, 2], vec![10, 11]),
        LossKind::FineOnly | LossKind::Hod => ClassLayout::fine(vec![0, 1, 2], vec![10, 11]),
    };
    let mut head = ClassifierHead::new(layout, kind, dim, 0, 0).unwrap();
    let nw = head.weights.len();
    head.weights = params[..nw].to_vec();
    head.biases = params[nw..nw + head.biases.len()].to_vec();
    head
}

fn kinds() -> impl Strategy<Value = LossKind> {
    prop_oneof![
        Just(LossKind::CeInlierOnly),
        Just(LossKind::Oe),
        Just(LossKind::RejectBucket),
        Just(LossKind::FineOnly),
        Just(LossKind::Hod),
    ]
}

proptest! {
    #[test]
    fn case_feature_ignores_instance_order(
        rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 1..=6),
        rot in 0usize..6,
    ) {
        let mut shuffled = rows.clone();
        shuffled.rotate_left(rot % rows.len());
        shuffled.reverse();
        let a = case_feature(&case(rows)).unwrap();
        let b = case_feature(&case(shuffled)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn case_feature_of_copies_is_the_vector(v in prop::collection::vec(-5.0..5.0f64, 1..8), k in 1usize..=6) {
        let f = case_feature(&case(vec![v.clone(); k])).unwrap();
        for (x, y) in f.iter().zip(&v) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn losses_are_non_negative(
        kind in kinds(),
        params in prop::collection::vec(-2.0..2.0f64, 30),
        x in prop::collection::vec(-3.0..3.0f64, 4),
        pick in 0usize..5,
    ) {
        let head = head_from(kind, &params, 4);
        let (label, is_outlier) = if kind == LossKind::CeInlierOnly || pick < 3 {
            ((pick % 3) as u32, false)
        } else {
            (10 + (pick - 3) as u32, true)
        };
        prop_assert!(head_loss(&head, &x, label, is_outlier).unwrap() >= 0.0);
    }

    #[test]
    fn hod_loss_falls_as_label_mass_grows(
        logits in prop::collection::vec(-3.0..3.0f64, 5),
        outlier in any::<bool>(),
        shift in 0.0..0.9f64,
    ) {
        // move mass to the label from a sibling in the same group
        let layout = ClassLayout::fine(vec![0, 1, 2], vec![10, 11]);
        let p = softmax(&logits).unwrap();
        let (label, idx, sib) = if outlier { (10, 3, 4) } else { (0, 0, 1) };
        let mut q = p.clone();
        let moved = shift * q[sib];
        q[idx] += moved;
        q[sib] -= moved;
        let before = hod_loss(&layout, &ProbabilityVector(p), label, 0.1).unwrap();
        let after = hod_loss(&layout, &ProbabilityVector(q), label, 0.1).unwrap();
        prop_assert!(after <= before + 1e-12);
    }

    #[test]
    fn outlier_mass_and_inlier_mass_sum_to_one(
        reject in any::<bool>(),
        params in prop::collection::vec(-2.0..2.0f64, 30),
        x in prop::collection::vec(-3.0..3.0f64, 4),
    ) {
        let kind = if reject { LossKind::RejectBucket } else { LossKind::Hod };
        let head = head_from(kind, &params, 4);
        let s = score_head(&head, &[Sample { case_id: 1, feature: x, label: 0, is_outlier: false }], Scorer::Hod).unwrap();
        let r = &s.rows[0];
        prop_assert!((r.ood_score + r.inlier_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!((r.confidence - (1.0 - r.ood_score)).abs() <= 1e-12);
    }

    #[test]
    fn top1_ignores_a_shared_logit_offset(
        kind in kinds(),
        params in prop::collection::vec(-2.0..2.0f64, 30),
        x in prop::collection::vec(-3.0..3.0f64, 4),
        c in -20.0..20.0f64,
    ) {
        let head = head_from(kind, &params, 4);
        let mut shifted = head.clone();
        shifted.biases.iter_mut().for_each(|b| *b += c);
        prop_assert_eq!(top1(&head, &x).unwrap(), top1(&shifted, &x).unwrap());
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms(
        inl in prop::collection::vec(0.0..1.0f64, 1..60),
        out in prop::collection::vec(0.0..1.0f64, 1..60),
    ) {
        let f = |v: &[f64]| v.iter().map(|x| (3.0 * x).exp() + x).collect::<Vec<_>>();
        let (ti, to) = (f(&inl), f(&out));
        prop_assert_eq!(auroc(&inl, &out).unwrap(), auroc(&ti, &to).unwrap());
        prop_assert_eq!(fpr_at_tpr(&inl, &out, 0.95).unwrap(), fpr_at_tpr(&ti, &to, 0.95).unwrap());
        prop_assert_eq!(aupr_in(&inl, &out).unwrap(), aupr_in(&ti, &to).unwrap());
    }

    #[test]
    fn auroc_is_antisymmetric(seed in any::<u64>(), ni in 1usize..80, no in 1usize..80) {
        let mut r = rng(seed);
        let a = tied_scores(&mut r, ni, 7);
        let b = tied_scores(&mut r, no, 7);
        prop_assert!((auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn averaged_scores_stay_on_the_simplex(seed in any::<u64>(), members in 1usize..6) {
        let mut r = rng(seed);
        let (base, _) = random_scoreset(&mut r, 30, 4, 0.3);
        let sets: Vec<ScoreSet> = (0..members).map(|_| {
            let (mut s, _) = random_scoreset(&mut r, 30, 4, 0.3);
            s.rows.iter_mut().zip(&base.rows).for_each(|(a, b)| a.case_id = b.case_id);
            s
        }).collect();
        let avg = average_scores(&sets.iter().collect::<Vec<_>>()).unwrap();
        for row in &avg.rows {
            let total = row.ood_score + row.inlier_probs.iter().sum::<f64>();
            prop_assert!((total - 1.0).abs() <= SIMPLEX_TOLERANCE);
            prop_assert!(row.inlier_probs.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
    }

    #[test]
    fn diversity_is_a_bounded_symmetric_dissimilarity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, _) = random_scoreset(&mut r, 40, 3, 0.3);
        let (mut b, _) = random_scoreset(&mut r, 40, 3, 0.3);
        b.rows.iter_mut().zip(&a.rows).for_each(|(x, y)| x.case_id = y.case_id);
        let d = diversity(&a, &b).unwrap();
        prop_assert_eq!(d, diversity(&b, &a).unwrap());
        prop_assert_eq!(diversity(&a, &a).unwrap(), 0.0);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn greedy_steps_are_argmax(seed in any::<u64>(), pool_size in 1usize..=6, size in 1usize..=4) {
        let mut r = rng(seed);
        let (base, labels) = random_scoreset(&mut r, 40, 3, 0.4);
        prop_assume!(labels.iter().any(|l| l.is_outlier) && labels.iter().any(|l| !l.is_outlier));
        let pool: Vec<ScoreSet> = (0..pool_size).map(|_| {
            let (mut s, _) = random_scoreset(&mut r, 40, 3, 0.4);
            s.rows.iter_mut().zip(&base.rows).for_each(|(a, b)| a.case_id = b.case_id);
            s
        }).collect();
        let refs: Vec<&ScoreSet> = pool.iter().collect();
        let sel = greedy_select(&refs, &labels, size).unwrap();
        prop_assert_eq!(sel.order.len(), size);
        for step in 0..size {
            let prefix = &sel.order[..step];
            let best = (0..pool_size)
                .map(|c| ensemble_criterion_oracle(&refs, &labels, &[prefix, &[c]].concat()))
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(sel.per_step_criterion[step], best);
        }
        let chosen: Vec<&ScoreSet> = sel.order.iter().map(|&i| &pool[i]).collect();
        let last = selection_criterion(&average_scores(&chosen).unwrap(), &labels).unwrap();
        prop_assert!((last - sel.per_step_criterion[size - 1]).abs() <= 1e-12);
        prop_assert_eq!(greedy_select(&refs, &labels, size).unwrap(), sel);
    }

    #[test]
    fn ward_heights_grow_on_euclidean_points(pts in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 2), 2..12)) {
        let n = pts.len();
        let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| {
            if i == j { 0.0 } else {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                pts[a].iter().zip(&pts[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            }
        }).collect()).collect();
        let tree = ward_dendrogram(&m).unwrap();
        prop_assert_eq!(tree.merges.len(), n - 1);
        prop_assert_eq!(tree.merges.last().unwrap().size, n);
        for w in tree.merges.windows(2) {
            prop_assert!(w[1].height >= w[0].height - 1e-9);
        }
    }

    #[test]
    fn mahalanobis_survives_invertible_maps(seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let dim = 3;
        let samples: Vec<(Vec<f64>, u32)> = (0..60)
            .map(|i| ((0..dim).map(|_| r.random_range(-1.0..1.0) + (i % 3) as f64).collect(), (i % 3) as u32))
            .collect();
        // upper-triangular map with a unit-bounded diagonal is invertible
        let a: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| match j.cmp(&i) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => r.random_range(0.5..2.0),
            std::cmp::Ordering::Greater => r.random_range(-1.0..1.0),
        }).collect()).collect();
        let map = |v: &[f64]| (0..dim).map(|i| (0..dim).map(|j| a[i][j] * v[j]).sum()).collect::<Vec<f64>>();
        let mapped: Vec<(Vec<f64>, u32)> = samples.iter().map(|(v, c)| (map(v), *c)).collect();
        let bank = fit_gaussians(&samples, 0.0).unwrap();
        let bank2 = fit_gaussians(&mapped, 0.0).unwrap();
        let probe: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..4.0)).collect();
        let d1 = ood_score_mahalanobis(&bank, &probe).unwrap();
        let d2 = ood_score_mahalanobis(&bank2, &map(&probe)).unwrap();
        prop_assert!((d1 - d2).abs() <= 1e-8 * (1.0 + d1));
        prop_assert!(d1 >= 0.0);
        for m in &bank.means {
            prop_assert_eq!(ood_score_mahalanobis(&bank, m.as_slice()).unwrap(), 0.0);
        }
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let mut r = rng(9);
    let samples: Vec<Sample> = (0..80u64)
        .map(|i| {
            use rand::Rng;
            let label = [0, 1, 2, 10, 11][i as usize % 5];
            Sample {
                case_id: i,
                feature: (0..4).map(|k| r.random_range(-1.0..1.0) + f64::from(label == k)).collect(),
                label,
                is_outlier: label >= 10,
            }
        })
        .collect();
    let head = ClassifierHead::new(ClassLayout::fine(vec![0, 1, 2], vec![10, 11]), LossKind::Hod, 4, 0, 3).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        eval_every: 50,
        seed: 5,
        ..TrainConfig::default()
    };
    let (a, ta) = train_head(&head, &samples, &samples, &cfg).unwrap();
    let (b, tb) = train_head(&head, &samples, &samples, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}
