//! Seeded long-tailed synthetic datasets and random nonlinear "views".
//!
//! Cases live in a latent space where each condition has a Gaussian
//! prototype; outlier prototypes come from the same meta-distribution as
//! inlier prototypes, so the shift is semantic only. A [`ViewEncoder`] maps
//! latent instances to feature space with `tanh(Wv + b)`, standing in for
//! different pre-trained encoders.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::domain::{
    Condition, ConditionStatus, ConditionTable, Dataset, LabeledCase, RiskLevel, SkinType, MAX_INSTANCES,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_inlier_classes: usize,
    pub num_outlier_classes: usize,
    pub zipf_exponent: f64,
    /// `n_min`: smallest inlier class size.
    pub inlier_min_count: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub instance_noise: f64,
    pub num_views: usize,
    /// Scale of the view weight matrices relative to `1/sqrt(latent_dim)`.
    pub view_gain: f64,
    /// Probabilities of low / medium / high risk per condition.
    pub risk_probs: [f64; 3],
    /// Probabilities of T12 / T3 / T4 / T56 / unknown per case.
    pub skin_probs: [f64; 5],
    pub max_cases_per_patient: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_inlier_classes: 10,
            num_outlier_classes: 60,
            zipf_exponent: 1.0,
            inlier_min_count: 100,
            latent_dim: 48,
            feature_dim: 32,
            class_separation: 0.35,
            instance_noise: 1.0,
            num_views: 2,
            view_gain: 1.5,
            risk_probs: [0.6, 0.3, 0.1],
            skin_probs: [0.2, 0.3, 0.3, 0.1, 0.1],
            max_cases_per_patient: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_inlier_classes == 0 || self.num_outlier_classes == 0 {
            return err("need at least one inlier and one outlier class");
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return err("zipf_exponent must be positive");
        }
        if self.inlier_min_count < 2 {
            return err("inlier_min_count must be at least 2");
        }
        if self.latent_dim == 0 || self.feature_dim == 0 || self.num_views == 0 {
            return err("dimensions and num_views must be positive");
        }
        if !(self.class_separation > 0.0) || !(self.instance_noise > 0.0) || !(self.view_gain > 0.0) {
            return err("class_separation, instance_noise and view_gain must be positive");
        }
        if self.max_cases_per_patient == 0 {
            return err("max_cases_per_patient must be positive");
        }
        if self.risk_probs.iter().chain(&self.skin_probs).any(|p| !(*p >= 0.0))
            || self.risk_probs.iter().sum::<f64>() <= 0.0
            || self.skin_probs.iter().sum::<f64>() <= 0.0
        {
            return err("categorical weights must be non-negative with positive mass");
        }
        Ok(())
    }

    /// Per-rank class sizes: `n_min * (K / r)^s`, rounded up for the `K`
    /// inlier ranks and down (at least 1) for the outlier ranks.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let k = self.num_inlier_classes as f64;
        let n_min = self.inlier_min_count;
        let total = self.num_inlier_classes + self.num_outlier_classes;
        let mut counts = Vec::with_capacity(total);
        for rank in 1..=total {
            let raw = n_min as f64 * (k / rank as f64).powf(self.zipf_exponent);
            let count = if rank <= self.num_inlier_classes {
                (raw.ceil() as usize).max(n_min)
            } else {
                (raw.floor() as usize).max(1)
            };
            counts.push(count);
        }
        if counts[self.num_inlier_classes] >= n_min {
            return Err(Error::Config(format!(
                "frequency profile leaves outlier rank {} with {} >= n_min samples",
                self.num_inlier_classes + 1,
                counts[self.num_inlier_classes]
            )));
        }
        Ok(counts)
    }
}

/// A generated latent-space dataset and the prototypes behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub prototypes: Vec<Vec<f64>>,
    pub config: SynthConfig,
}

fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    WeightedIndex::new(weights)
        .expect("validated weights")
        .sample(rng)
}

/// Draws a long-tailed dataset in latent space.
pub fn generate_longtail_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    let counts = cfg.class_counts()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth"));
    let proto_dist = Normal::new(0.0, cfg.class_separation).expect("positive scale");
    let noise = Normal::new(0.0, cfg.instance_noise).expect("positive scale");

    let prototypes: Vec<Vec<f64>> = counts
        .iter()
        .map(|_| (0..cfg.latent_dim).map(|_| proto_dist.sample(&mut rng)).collect())
        .collect();

    let conditions: Vec<Condition> = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| Condition {
            id: i as u32,
            name: format!("condition_{i:03}"),
            status: if n >= cfg.inlier_min_count {
                ConditionStatus::Inlier
            } else {
                ConditionStatus::Outlier
            },
            risk: RiskLevel::ALL[categorical(&mut rng, &cfg.risk_probs)],
            sample_count: n,
        })
        .collect();
    let table = ConditionTable {
        n_min: cfg.inlier_min_count,
        conditions,
    };

    let mut cases = Vec::new();
    for (cond, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let j = rng.random_range(1..=MAX_INSTANCES);
            let instances = (0..j)
                .map(|_| {
                    prototypes[cond]
                        .iter()
                        .map(|m| m + noise.sample(&mut rng))
                        .collect()
                })
                .collect();
            cases.push(LabeledCase {
                case_id: cases.len() as u64,
                patient_id: 0,
                condition_id: cond as u32,
                skin_type: SkinType::ALL[categorical(&mut rng, &cfg.skin_probs)],
                instances,
            });
        }
    }

    // Inlier cases group into patients across inlier conditions; outlier
    // cases only group within their own condition, so pinning an outlier
    // condition to a split never drags a patient into two splits.
    let mut next_patient = 0u64;
    let mut assign = |indices: &mut Vec<usize>, rng: &mut ChaCha8Rng, cases: &mut Vec<LabeledCase>| {
        indices.shuffle(rng);
        let mut rest = indices.as_slice();
        while !rest.is_empty() {
            let take = rng.random_range(1..=cfg.max_cases_per_patient).min(rest.len());
            for &i in &rest[..take] {
                cases[i].patient_id = next_patient;
            }
            next_patient += 1;
            rest = &rest[take..];
        }
    };
    let mut inlier_idx: Vec<usize> = (0..cases.len())
        .filter(|&i| (cases[i].condition_id as usize) < cfg.num_inlier_classes)
        .collect();
    assign(&mut inlier_idx, &mut rng, &mut cases);
    for cond in cfg.num_inlier_classes..counts.len() {
        let mut idx: Vec<usize> = (0..cases.len())
            .filter(|&i| cases[i].condition_id as usize == cond)
            .collect();
        assign(&mut idx, &mut rng, &mut cases);
    }

    let dataset = Dataset { table, cases };
    dataset.validate()?;
    Ok(SyntheticDataset {
        dataset,
        prototypes,
        config: cfg.clone(),
    })
}

/// Fixed random map `tanh(W v + b)` from latent to feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEncoder {
    pub view_id: u32,
    pub latent_dim: usize,
    pub feature_dim: usize,
    /// Row-major `feature_dim x latent_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ViewEncoder {
    /// Deterministic in `(benchmark_seed, view_id)`.
    pub fn new(benchmark_seed: u64, view_id: u32, latent_dim: usize, feature_dim: usize, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            derive_seed(benchmark_seed, "view"),
            &view_id.to_string(),
        ));
        let w = Normal::new(0.0, gain / (latent_dim as f64).sqrt()).expect("positive scale");
        let b = Normal::new(0.0, 0.1).expect("positive scale");
        ViewEncoder {
            view_id,
            latent_dim,
            feature_dim,
            weights: (0..feature_dim * latent_dim).map(|_| w.sample(&mut rng)).collect(),
            bias: (0..feature_dim).map(|_| b.sample(&mut rng)).collect(),
        }
    }

    pub fn for_config(cfg: &SynthConfig, view_id: u32) -> Self {
        ViewEncoder::new(cfg.seed, view_id, cfg.latent_dim, cfg.feature_dim, cfg.view_gain)
    }

    pub fn encode(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.latent_dim {
            return Err(Error::InvalidInput(format!(
                "latent vector has dimension {}, view expects {}",
                v.len(),
                self.latent_dim
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.latent_dim)
            .zip(&self.bias)
            .map(|(row, b)| (row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() + b).tanh())
            .collect())
    }
}

/// Maps every instance of a latent case through the view; labels and
/// metadata are preserved.
pub fn encode_view(case: &LabeledCase, view: &ViewEncoder) -> Result<LabeledCase> {
    let instances = case
        .instances
        .iter()
        .map(|v| view.encode(v))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledCase {
        instances,
        ..case.clone()
    })
}
