use std::fs;
use std::path::Path;
use std::process::Command;

use hodbench::error::Error;
use hodbench::experiment::PoolSpec;
use hodbench::heads::{LossKind, TrainConfig};
use hodbench::pipeline::{
    compare, emit_report, read_manifest, run_pipeline, run_stage, ExperimentConfig, ReportFormat, Stage,
    StageOutcome, Summary,
};

fn small(dir: &Path, kind: LossKind) -> ExperimentConfig {
    ExperimentConfig {
        seed: 3,
        pool: vec![PoolSpec::new(0, kind, 2)],
        train: TrainConfig { steps: 200, eval_every: 50, ..TrainConfig::default() },
        heterogeneity_fractions: vec![0.5, 1.0],
        out_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn stages_skip_when_nothing_changed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), LossKind::Hod);
    run_pipeline(&cfg).unwrap();
    for stage in Stage::ALL {
        assert_eq!(run_stage(&cfg, stage).unwrap(), StageOutcome::UpToDate, "{stage}");
        let m = read_manifest(dir.path(), stage).unwrap();
        assert!(!m.outputs.is_empty());
    }

    // a changed cost matrix only reruns what depends on it
    let mut changed = cfg.clone();
    changed.cost.abstain_inlier = 0.25;
    assert_eq!(run_stage(&changed, Stage::Train).unwrap(), StageOutcome::UpToDate);
    assert_eq!(run_stage(&changed, Stage::Evaluate).unwrap(), StageOutcome::Ran);

    // a tampered output forces a rerun
    fs::write(dir.path().join("split.json"), "{}").unwrap();
    assert_eq!(run_stage(&cfg, Stage::Split).unwrap(), StageOutcome::Ran);
}

#[test]
fn stage_errors_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), LossKind::Hod);
    let err = run_stage(&cfg, Stage::Score).unwrap_err();
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "score");
            assert!(matches!(**source, Error::IncompleteExperiment(_)));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn reports_and_comparison() {
    let root = tempfile::tempdir().unwrap();
    let a = small(&root.path().join("reject"), LossKind::RejectBucket);
    let b = small(&root.path().join("hod"), LossKind::Hod);
    run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();

    let csv = emit_report(&a.out_dir, ReportFormat::Csv).unwrap();
    assert!(csv.iter().all(|p| p.extension().unwrap() == "csv"));
    let metrics = fs::read_to_string(a.out_dir.join("report/metrics.csv")).unwrap();
    assert!(metrics.starts_with("name,metric,value\n"));
    assert!(metrics.contains("diverse,auroc,"));
    let svg = emit_report(&a.out_dir, ReportFormat::Svg).unwrap();
    assert!(svg.iter().any(|p| p.ends_with("report/accuracy_vs_recall.svg")));
    assert!(fs::read_to_string(a.out_dir.join("report/cost_vs_recall.svg")).unwrap().contains("<polyline"));
    let json = emit_report(&a.out_dir, ReportFormat::Json).unwrap();
    assert_eq!(json.len(), 1);

    let sa = Summary::read(&a.out_dir.join("summary.json")).unwrap();
    let sb = Summary::read(&b.out_dir.join("summary.json")).unwrap();
    let cmp = compare(&sa, &sb).unwrap();
    assert_eq!(cmp.pairs.len(), 2);
    assert_eq!(cmp.pairs[0].a, "v0-reject_bucket-s0");
    assert_eq!(cmp.pairs[0].b, "v0-hod-s0");
    assert_eq!(cmp.auroc.positive + cmp.auroc.negative + cmp.auroc.ties, 2);

    let mut other = sb.clone();
    other.seed += 1;
    assert!(matches!(compare(&sa, &other), Err(Error::IncomparableRuns(_))));
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_hodbench");
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args(["--out", dir.path().to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "synth": {"num_outlier_classes": 30}}"#).unwrap();
    for stage in ["generate", "split"] {
        let out = Command::new(bin)
            .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "2", stage])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let split = fs::read_to_string(dir.path().join("split.json")).unwrap();
    assert!(split.contains("\"seed\": 2"));
}
