//! Hierarchical outlier detection benchmarking on long-tailed feature
//! embeddings.
//!
//! The crate covers the whole loop: generate a seeded long-tailed dataset
//! ([`synth`]), partition it into a benchmark with disjoint outlier
//! conditions per split ([`splitter`]), train linear softmax heads with the
//! hierarchical fine + coarse loss and its baselines ([`heads`]), score
//! cases ([`scoring`]), evaluate ([`metrics`]), ensemble ([`ensemble`]) and
//! run reproducible experiments that write every artifact to disk
//! ([`pipeline`]).
//!
//! Runnable examples live in `examples/`, one per capability:
//!
//! ```bash
//! cargo run --release -p hodbench --example hod_loss        # losses and gradient check
//! cargo run --release -p hodbench --example synthetic_data  # long-tailed generator and views
//! cargo run --release -p hodbench --example benchmark_split # constrained split + desiderata
//! cargo run --release -p hodbench --example hod_vs_reject   # HOD heads against a reject bucket
//! cargo run --release -p hodbench --example ood_metrics     # AUROC, FPR@95%TPR, AUPR-in
//! cargo run --release -p hodbench --example trust_curves    # selective accuracy and cost curves
//! cargo run --release -p hodbench --example mahalanobis     # feature-space baseline
//! cargo run --release -p hodbench --example ensembles       # vanilla, greedy, Ward clustering
//! cargo run --release -p hodbench --example heterogeneity   # training-outlier ablation
//! cargo run --release -p hodbench --example pipeline        # on-disk experiment + compare
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod metrics;
pub mod pipeline;
pub mod scoring;
pub mod splitter;
pub mod synth;

pub use error::{Error, Result};

/// Derives an independent 64-bit seed from `base` and a tag (splitmix64 over
/// an FNV-1a hash of the tag).
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
