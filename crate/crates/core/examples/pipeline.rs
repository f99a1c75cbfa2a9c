//! End-to-end experiment written to disk, then a report and a comparison
//! between an HOD-only and a reject-only run of the same benchmark.
use std::path::PathBuf;

use hodbench::experiment::PoolSpec;
use hodbench::heads::{LossKind, TrainConfig};
use hodbench::pipeline::{compare, emit_report, run_pipeline, ExperimentConfig, ReportFormat, Summary};

fn main() -> hodbench::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("hodbench-example"));
    let run = |kind: LossKind, dir: &str| -> hodbench::Result<Summary> {
        let cfg = ExperimentConfig {
            pool: vec![PoolSpec::new(0, kind, 3)],
            train: TrainConfig { steps: 1000, ..TrainConfig::default() },
            heterogeneity_fractions: vec![0.5, 1.0],
            out_dir: root.join(dir),
            ..ExperimentConfig::default()
        };
        let out = run_pipeline(&cfg)?;
        for p in emit_report(&out, ReportFormat::Svg)? {
            println!("wrote {}", p.display());
        }
        Summary::read(&out.join("summary.json"))
    };
    let reject = run(LossKind::RejectBucket, "reject")?;
    let hod = run(LossKind::Hod, "hod")?;
    let cmp = compare(&reject, &hod)?;
    for p in &cmp.pairs {
        println!("{} -> {}: auroc {:+.4}", p.a, p.b, p.auroc);
    }
    println!("auroc sign test: {:?}", cmp.auroc);
    Ok(())
}
