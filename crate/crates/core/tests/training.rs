mod common;

use hodbench::domain::SplitName;
use hodbench::heads::{dataset_loss, train_head, ClassLayout, ClassifierHead, LossKind, Sample, TrainConfig};
use hodbench::scoring::{score_head, Scorer};
use hodbench::splitter::{build_benchmark, SplitConfig};
use hodbench::synth::{generate_longtail_dataset, SynthConfig};
use rand::Rng;

/// Two inlier and two outlier classes around the corners of a square.
fn toy(seed: u64, n: usize) -> Vec<Sample> {
    let mut r = common::rng(seed);
    let centers = [(0, [3.0, 3.0]), (1, [-3.0, 3.0]), (10, [3.0, -3.0]), (11, [-3.0, -3.0])];
    (0..n)
        .map(|i| {
            let (label, c) = centers[i % 4];
            Sample {
                case_id: i as u64,
                feature: c.iter().map(|x| x + r.random_range(-0.5..0.5)).collect(),
                label,
                is_outlier: label >= 10,
            }
        })
        .collect()
}

#[test]
fn toy_training_cuts_the_loss_tenfold() {
    let train = toy(1, 200);
    let val = toy(2, 80);
    for kind in [LossKind::Hod, LossKind::FineOnly] {
        let head = ClassifierHead::new(ClassLayout::fine(vec![0, 1], vec![10, 11]), kind, 2, 0, 4).unwrap();
        let cfg = TrainConfig { steps: 500, eval_every: 100, ..TrainConfig::default() };
        let before = dataset_loss(&head, &train).unwrap();
        let (trained, trace) = train_head(&head, &train, &val, &cfg).unwrap();
        let after = dataset_loss(&trained, &train).unwrap();
        assert!(after < 0.1 * before, "{kind}: {before} -> {after}");
        assert!(trace.best_step <= 500);
    }
}

#[test]
fn trained_head_puts_more_outlier_mass_on_outliers() {
    let train = toy(3, 200);
    let test = toy(4, 120);
    let head = ClassifierHead::new(ClassLayout::fine(vec![0, 1], vec![10, 11]), LossKind::Hod, 2, 0, 5).unwrap();
    let cfg = TrainConfig { steps: 500, eval_every: 100, ..TrainConfig::default() };
    let (trained, _) = train_head(&head, &train, &train, &cfg).unwrap();
    let s = score_head(&trained, &test, Scorer::Hod).unwrap();
    let mean = |outlier: bool| {
        let v: Vec<f64> = s.rows.iter().zip(&test).filter(|(_, t)| t.is_outlier == outlier).map(|(r, _)| r.ood_score).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) > mean(false));
}

#[test]
fn split_partitions_cases_and_is_reproducible() {
    for seed in [0u64, 7, 13] {
        let data = generate_longtail_dataset(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let cfg = SplitConfig { seed, ..SplitConfig::default() };
        let split = build_benchmark(&data.dataset, &cfg).unwrap();
        assert_eq!(split, build_benchmark(&data.dataset, &cfg).unwrap());
        let mut all: Vec<u64> = SplitName::ALL.iter().flat_map(|s| split.cases(*s).to_vec()).collect();
        all.sort_unstable();
        let mut expected: Vec<u64> = data.dataset.cases.iter().map(|c| c.case_id).collect();
        expected.sort_unstable();
        assert_eq!(all, expected);
        let conds = SplitName::ALL.map(|s| split.outlier_conditions(s));
        for (i, a) in conds.iter().enumerate() {
            for b in &conds[i + 1..] {
                assert!(a.iter().all(|c| !b.contains(c)));
            }
        }
    }
}

#[test]
fn generated_counts_respect_n_min() {
    let cfg = SynthConfig { seed: 3, ..SynthConfig::default() };
    let data = generate_longtail_dataset(&cfg).unwrap();
    let table = &data.dataset.table;
    for c in &table.conditions {
        let n = data.dataset.cases.iter().filter(|k| k.condition_id == c.id).count();
        assert_eq!(n, c.sample_count);
        if table.is_outlier(c.id) {
            assert!(n >= 1 && n < table.n_min);
        } else {
            assert!(n >= table.n_min);
        }
    }
}
