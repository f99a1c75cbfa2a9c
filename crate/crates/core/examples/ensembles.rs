//! Vanilla and greedily selected ensembles over a mixed pool, plus the
//! diversity matrix and its Ward dendrogram.
use hodbench::domain::SplitName;
use hodbench::ensemble::{diversity_matrix, ward_dendrogram};
use hodbench::experiment::{diverse_ensemble, ensemble_scores, expand_pool, train_pool, vanilla_groups, Benchmark, PoolSpec};
use hodbench::heads::{LossKind, TrainConfig};
use hodbench::metrics::evaluate;
use hodbench::splitter::SplitConfig;
use hodbench::synth::SynthConfig;

fn main() -> hodbench::Result<()> {
    let bench = Benchmark::generate(&SynthConfig::default(), &SplitConfig::default())?;
    let specs: Vec<PoolSpec> = (0..2)
        .flat_map(|v| [PoolSpec::new(v, LossKind::Hod, 5), PoolSpec::new(v, LossKind::RejectBucket, 5)])
        .collect();
    let members = expand_pool(&specs);
    let pool = train_pool(&bench, &members, &TrainConfig::default(), 0)?;
    let labels = bench.labels(SplitName::Test);

    for (name, idx) in vanilla_groups(&members) {
        let (_, test) = ensemble_scores(&pool, &idx)?;
        println!("vanilla {name:<18} test auroc {:.4}", evaluate(&test, labels)?.auroc);
    }
    let sel = diverse_ensemble(&bench, &pool, 5)?;
    let (_, test) = ensemble_scores(&pool, &sel.order)?;
    let names: Vec<String> = sel.order.iter().map(|&i| members[i].name()).collect();
    println!("diverse {names:?} test auroc {:.4}", evaluate(&test, labels)?.auroc);
    println!("  validation criterion per step {:.4?}", sel.per_step_criterion);

    let d = diversity_matrix(&pool.test_scores())?;
    let tree = ward_dendrogram(&d)?;
    for m in tree.merges.iter().rev().take(3) {
        println!("merge {} + {} at {:.4} (size {})", m.left, m.right, m.height, m.size);
    }
    Ok(())
}
