//! Patient-aware benchmark split with disjoint outlier conditions.
use hodbench::domain::SplitName;
use hodbench::splitter::{build_benchmark, validate_split, SplitConfig};
use hodbench::synth::{generate_longtail_dataset, SynthConfig};

fn main() -> hodbench::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = generate_longtail_dataset(&SynthConfig { seed, ..SynthConfig::default() })?;
    let cfg = SplitConfig { seed, ..SplitConfig::default() };
    let split = build_benchmark(&data.dataset, &cfg)?;
    for s in SplitName::ALL {
        println!("{s:?}: {} cases, outlier conditions {:?}", split.cases(s).len(), split.outlier_conditions(s));
    }
    let report = validate_split(&data.dataset, &split, &cfg);
    for d in &report.desiderata {
        println!("  [{}] {} ({})", if d.passed { "ok" } else { "FAIL" }, d.name, d.measured);
    }
    Ok(())
}
