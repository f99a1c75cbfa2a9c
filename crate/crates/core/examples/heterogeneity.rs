//! Test AUROC as training sees more distinct outlier conditions.
use hodbench::experiment::{heterogeneity_ablation, Benchmark};
use hodbench::heads::TrainConfig;
use hodbench::splitter::SplitConfig;
use hodbench::synth::SynthConfig;

fn main() -> hodbench::Result<()> {
    let bench = Benchmark::generate(&SynthConfig::default(), &SplitConfig::default())?;
    let rows = heterogeneity_ablation(&bench, 0, &[0.25, 0.5, 0.75, 1.0], 3, &TrainConfig::default(), 0)?;
    for r in rows {
        println!("{:>4} of train outliers: {:2} classes, {:4} samples, auroc {:.4} {:.4?}", r.fraction, r.outlier_classes, r.outlier_samples, r.mean_test_auroc, r.test_auroc);
    }
    Ok(())
}
