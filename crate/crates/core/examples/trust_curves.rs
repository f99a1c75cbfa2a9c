//! Selective accuracy, outlier recall and cost as the confidence threshold moves.
use hodbench::domain::SplitName;
use hodbench::experiment::{expand_pool, score_member, train_member, Benchmark, PoolSpec};
use hodbench::heads::{LossKind, TrainConfig};
use hodbench::metrics::{subgroup_report, threshold_curve, CostMatrix, SubgroupBy};
use hodbench::splitter::SplitConfig;
use hodbench::synth::SynthConfig;

fn main() -> hodbench::Result<()> {
    let bench = Benchmark::generate(&SynthConfig::default(), &SplitConfig::default())?;
    let member = &expand_pool(&[PoolSpec::new(0, LossKind::Hod, 1)])[0];
    let (head, _) = train_member(&bench, member, None, &TrainConfig::default(), 0)?;
    let (_, test) = score_member(&bench, &head)?;
    let labels = bench.labels(SplitName::Test);

    let curve = threshold_curve(&test, labels, &CostMatrix::default())?;
    println!("   tau  recall  accuracy   cost");
    for p in curve.iter().filter(|p| (p.tau * 10.0).fract() == 0.0) {
        println!("{:6.2} {:7.3} {:9.3} {:6.3}", p.tau, p.outlier_recall.unwrap_or(f64::NAN), p.accuracy.unwrap_or(f64::NAN), p.cost);
    }
    for row in subgroup_report(&test, labels, SubgroupBy::Risk)? {
        println!("risk {:>6}: {} outliers, auroc {:?}", row.group, row.outliers, row.auroc);
    }
    Ok(())
}
