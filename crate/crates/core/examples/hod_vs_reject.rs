//! HOD heads against reject-bucket heads on the desk benchmark.
use hodbench::domain::SplitName;
use hodbench::experiment::{expand_pool, train_pool, Benchmark, PoolSpec};
use hodbench::heads::{LossKind, TrainConfig};
use hodbench::metrics::{auroc, split_scores};
use hodbench::pipeline::sign_test;
use hodbench::splitter::SplitConfig;
use hodbench::synth::SynthConfig;

fn main() -> hodbench::Result<()> {
    let mut deltas = Vec::new();
    for seed in 0..3 {
        let bench = Benchmark::generate(&SynthConfig { seed, ..SynthConfig::default() }, &SplitConfig { seed, ..SplitConfig::default() })?;
        let specs = [PoolSpec::new(0, LossKind::Hod, 3), PoolSpec::new(0, LossKind::RejectBucket, 3)];
        let pool = train_pool(&bench, &expand_pool(&specs), &TrainConfig::default(), seed)?;
        let mean = |kind| -> hodbench::Result<f64> {
            let mut v = Vec::new();
            for m in pool.members.iter().filter(|m| m.tag.loss_kind == kind) {
                let (i, o) = split_scores(&m.test, bench.labels(SplitName::Test))?;
                v.push(auroc(&i, &o)?);
            }
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        };
        let (hod, rej) = (mean(LossKind::Hod)?, mean(LossKind::RejectBucket)?);
        println!("seed {seed}: hod {hod:.4}  reject {rej:.4}");
        deltas.push(hod - rej);
    }
    println!("{:?}", sign_test(&deltas));
    Ok(())
}
