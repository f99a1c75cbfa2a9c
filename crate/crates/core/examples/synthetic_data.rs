//! Seeded long-tailed dataset and two encoder views of it.
use hodbench::domain::ConditionStatus;
use hodbench::synth::{encode_view, generate_longtail_dataset, SynthConfig, ViewEncoder};

fn main() -> hodbench::Result<()> {
    let cfg = SynthConfig::default();
    let data = generate_longtail_dataset(&cfg)?;
    let ds = &data.dataset;
    let inliers = ds.table.conditions.iter().filter(|c| c.status == ConditionStatus::Inlier);
    println!("inlier sample counts: {:?}", inliers.map(|c| c.sample_count).collect::<Vec<_>>());
    let outliers: Vec<usize> = ds.table.conditions.iter().filter(|c| c.status == ConditionStatus::Outlier).map(|c| c.sample_count).collect();
    println!("{} outlier conditions, largest {:?}, total {}", outliers.len(), outliers.iter().max(), outliers.iter().sum::<usize>());
    println!("{} cases", ds.cases.len());

    let case = &ds.cases[0];
    for view in 0..cfg.num_views as u32 {
        let enc = ViewEncoder::for_config(&cfg, view);
        let f = encode_view(case, &enc)?.feature()?;
        println!("case {} view {view}: {:.3?}", case.case_id, &f[..4]);
    }
    Ok(())
}
