//! Feature-space Mahalanobis baseline next to a trained HOD head.
use hodbench::domain::SplitName;
use hodbench::experiment::{expand_pool, mahalanobis_baseline, score_member, train_member, Benchmark, PoolSpec};
use hodbench::heads::{LossKind, TrainConfig};
use hodbench::metrics::evaluate;
use hodbench::scoring::DEFAULT_RIDGE;
use hodbench::splitter::SplitConfig;
use hodbench::synth::SynthConfig;

fn main() -> hodbench::Result<()> {
    let bench = Benchmark::generate(&SynthConfig::default(), &SplitConfig::default())?;
    let labels = bench.labels(SplitName::Test);
    let (_, maha) = mahalanobis_baseline(&bench, 0, DEFAULT_RIDGE)?;
    let r = evaluate(&maha, labels)?;
    println!("mahalanobis  auroc {:.4}  fpr95 {:.4}  aupr-in {:.4}", r.auroc, r.fpr_at_95_tpr, r.aupr_in);

    let member = &expand_pool(&[PoolSpec::new(0, LossKind::Hod, 1)])[0];
    let (head, _) = train_member(&bench, member, None, &TrainConfig::default(), 0)?;
    let r = evaluate(&score_member(&bench, &head)?.1, labels)?;
    println!("hod head     auroc {:.4}  fpr95 {:.4}  aupr-in {:.4}", r.auroc, r.fpr_at_95_tpr, r.aupr_in);
    Ok(())
}
