//! In-memory experiment building blocks: per-view benchmark features,
//! seeded model pools trained in parallel, vanilla and greedy ensembles,
//! the Mahalanobis baseline and the training-outlier heterogeneity
//! ablation. [`crate::pipeline`] wraps these with on-disk artifacts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::domain::{case_feature, BenchmarkSplit, CaseLabel, Dataset, SplitName};
use crate::ensemble::{average_scores, greedy_select, EnsembleSelection, ModelPool, ModelTag, PoolMember};
use crate::error::{Error, Result};
use crate::heads::{train_head, ClassLayout, ClassifierHead, LossKind, Sample, TrainConfig, TrainingTrace};
use crate::metrics::{evaluate, split_scores, MetricReport};
use crate::scoring::{fit_gaussians, score_head, score_mahalanobis, ScoreSet, Scorer};
use crate::splitter::{build_benchmark, SplitConfig};
use crate::synth::{encode_view, generate_longtail_dataset, SynthConfig, ViewEncoder};

/// Case-level features of one view, per split, in split order.
#[derive(Debug, Clone)]
pub struct ViewFeatures {
    pub view_id: u32,
    pub splits: [Vec<Sample>; 3],
}

/// A split dataset with features for every view.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub dataset: Dataset,
    pub split: BenchmarkSplit,
    pub views: Vec<ViewFeatures>,
    pub labels: [Vec<CaseLabel>; 3],
    pub inlier_ids: Vec<u32>,
    /// Outlier conditions assigned to train, ascending.
    pub train_outliers: Vec<u32>,
}

fn view_features(dataset: &Dataset, split: &BenchmarkSplit, encoder: &ViewEncoder) -> Result<ViewFeatures> {
    let index = dataset.case_index();
    let splits = SplitName::ALL.map(|s| {
        split
            .cases(s)
            .iter()
            .map(|id| {
                let case = &dataset.cases[*index
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("split refers to unknown case {id}")))?];
                Ok(Sample {
                    case_id: case.case_id,
                    feature: case_feature(&encode_view(case, encoder)?)?,
                    label: case.condition_id,
                    is_outlier: dataset.table.is_outlier(case.condition_id),
                })
            })
            .collect::<Result<Vec<_>>>()
    });
    let [train, val, test] = splits;
    Ok(ViewFeatures {
        view_id: encoder.view_id,
        splits: [train?, val?, test?],
    })
}

impl Benchmark {
    pub fn new(dataset: Dataset, split: BenchmarkSplit, encoders: &[ViewEncoder]) -> Result<Self> {
        dataset.validate()?;
        let views = encoders
            .par_iter()
            .map(|e| view_features(&dataset, &split, e))
            .collect::<Result<Vec<_>>>()?;
        let labels = [
            dataset.labels_for(&split.train)?,
            dataset.labels_for(&split.val)?,
            dataset.labels_for(&split.test)?,
        ];
        Ok(Benchmark {
            inlier_ids: dataset.table.inlier_ids(),
            train_outliers: split.outlier_conditions(SplitName::Train),
            dataset,
            split,
            views,
            labels,
        })
    }

    /// Generates a dataset, splits it and encodes every configured view.
    pub fn generate(synth: &SynthConfig, split: &SplitConfig) -> Result<Self> {
        let data = generate_longtail_dataset(synth)?;
        let s = build_benchmark(&data.dataset, split)?;
        let encoders: Vec<ViewEncoder> = (0..synth.num_views as u32)
            .map(|v| ViewEncoder::for_config(synth, v))
            .collect();
        Benchmark::new(data.dataset, s, &encoders)
    }

    pub fn view(&self, view_id: u32) -> Result<&ViewFeatures> {
        self.views
            .iter()
            .find(|v| v.view_id == view_id)
            .ok_or_else(|| Error::Config(format!("view {view_id} does not exist")))
    }

    pub fn samples(&self, view_id: u32, split: SplitName) -> Result<&[Sample]> {
        Ok(&self.view(view_id)?.splits[split.index()])
    }

    pub fn labels(&self, split: SplitName) -> &[CaseLabel] {
        &self.labels[split.index()]
    }

    pub fn dim(&self) -> usize {
        self.views
            .first()
            .and_then(|v| v.splits[0].first())
            .map_or(0, |s| s.feature.len())
    }
}

/// Output layout a loss needs given the inlier and training-outlier ids.
pub fn layout_for(kind: LossKind, inliers: &[u32], outliers: &[u32]) -> ClassLayout {
    match kind {
        LossKind::Hod | LossKind::FineOnly => ClassLayout::fine(inliers.to_vec(), outliers.to_vec()),
        LossKind::RejectBucket => ClassLayout::reject(inliers.to_vec(), outliers.to_vec()),
        LossKind::CeInlierOnly | LossKind::Oe => ClassLayout::inlier_only(inliers.to_vec()),
    }
}

/// One line of a pool specification: `num_seeds` heads of one loss on one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub view_id: u32,
    pub loss_kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub num_seeds: usize,
}

impl PoolSpec {
    pub fn new(view_id: u32, loss_kind: LossKind, num_seeds: usize) -> Self {
        PoolSpec {
            view_id,
            loss_kind,
            lambda: None,
            num_seeds,
        }
    }

    /// Name shared by every seed of this spec.
    pub fn config_name(&self) -> String {
        match self.lambda {
            Some(l) => format!("v{}-{}-l{l}", self.view_id, self.loss_kind),
            None => format!("v{}-{}", self.view_id, self.loss_kind),
        }
    }
}

/// A single head to train.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberSpec {
    pub tag: ModelTag,
    pub lambda: Option<f64>,
    pub config_name: String,
}

impl MemberSpec {
    pub fn name(&self) -> String {
        format!("{}-s{}", self.config_name, self.tag.seed)
    }
}

pub fn expand_pool(specs: &[PoolSpec]) -> Vec<MemberSpec> {
    specs
        .iter()
        .flat_map(|p| {
            (0..p.num_seeds as u64).map(move |seed| MemberSpec {
                tag: ModelTag {
                    view_id: p.view_id,
                    loss_kind: p.loss_kind,
                    seed,
                },
                lambda: p.lambda,
                config_name: p.config_name(),
            })
        })
        .collect()
}

/// Trains one head on the benchmark's train split (optionally with only a
/// subset of the training outlier conditions) and validates on val.
pub fn train_member(
    bench: &Benchmark,
    member: &MemberSpec,
    outliers: Option<&[u32]>,
    cfg: &TrainConfig,
    master_seed: u64,
) -> Result<(ClassifierHead, TrainingTrace)> {
    let tag = member.tag;
    let outliers = outliers.unwrap_or(&bench.train_outliers);
    let layout = layout_for(tag.loss_kind, &bench.inlier_ids, outliers);
    let key = format!("{}/{}", member.name(), outliers.len());
    let mut head = ClassifierHead::new(
        layout,
        tag.loss_kind,
        bench.dim(),
        tag.view_id,
        derive_seed(master_seed, &format!("init/{key}")),
    )?;
    if let Some(l) = member.lambda {
        head = head.with_lambda(l);
    }
    let keep = |s: &&Sample| !s.is_outlier || outliers.binary_search(&s.label).is_ok();
    let train: Vec<Sample> = bench
        .samples(tag.view_id, SplitName::Train)?
        .iter()
        .filter(keep)
        .cloned()
        .collect();
    let cfg = TrainConfig {
        seed: derive_seed(master_seed ^ cfg.seed, &format!("sgd/{key}")),
        ..cfg.clone()
    };
    train_head(&head, &train, bench.samples(tag.view_id, SplitName::Val)?, &cfg)
}

/// Scores a head on val and test with its default scorer.
pub fn score_member(bench: &Benchmark, head: &ClassifierHead) -> Result<(ScoreSet, ScoreSet)> {
    let scorer = Scorer::default_for(head.loss_kind);
    Ok((
        score_head(head, bench.samples(head.view_id, SplitName::Val)?, scorer)?,
        score_head(head, bench.samples(head.view_id, SplitName::Test)?, scorer)?,
    ))
}

/// Trains and scores every member; members run in parallel and the pool
/// keeps specification order.
pub fn train_pool(bench: &Benchmark, members: &[MemberSpec], cfg: &TrainConfig, master_seed: u64) -> Result<ModelPool> {
    let members = members
        .par_iter()
        .map(|m| {
            let (head, _) = train_member(bench, m, None, cfg, master_seed)?;
            let (val, test) = score_member(bench, &head)?;
            Ok(PoolMember {
                tag: m.tag,
                head,
                val,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelPool { members })
}

/// Val and test reports of a score-set pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReports {
    pub val: MetricReport,
    pub test: MetricReport,
}

pub fn evaluate_pair(bench: &Benchmark, val: &ScoreSet, test: &ScoreSet) -> Result<SplitReports> {
    Ok(SplitReports {
        val: evaluate(val, bench.labels(SplitName::Val))?,
        test: evaluate(test, bench.labels(SplitName::Test))?,
    })
}

/// Pool indices grouped by configuration (all seeds of one spec), in
/// first-appearance order.
pub fn vanilla_groups(members: &[MemberSpec]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, m) in members.iter().enumerate() {
        match groups.iter_mut().find(|(n, _)| *n == m.config_name) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((m.config_name.clone(), vec![i])),
        }
    }
    groups
}

/// Average of the selected pool members on val and test.
pub fn ensemble_scores(pool: &ModelPool, members: &[usize]) -> Result<(ScoreSet, ScoreSet)> {
    let val: Vec<&ScoreSet> = members.iter().map(|&i| &pool.members[i].val).collect();
    let test: Vec<&ScoreSet> = members.iter().map(|&i| &pool.members[i].test).collect();
    Ok((average_scores(&val)?, average_scores(&test)?))
}

pub fn diverse_ensemble(bench: &Benchmark, pool: &ModelPool, size: usize) -> Result<EnsembleSelection> {
    greedy_select(&pool.val_scores(), bench.labels(SplitName::Val), size)
}

/// Mahalanobis scores on val and test from Gaussians fitted to the train
/// inliers of one view.
pub fn mahalanobis_baseline(bench: &Benchmark, view_id: u32, ridge: f64) -> Result<(ScoreSet, ScoreSet)> {
    let fit: Vec<(Vec<f64>, u32)> = bench
        .samples(view_id, SplitName::Train)?
        .iter()
        .filter(|s| !s.is_outlier)
        .map(|s| (s.feature.clone(), s.label))
        .collect();
    let bank = fit_gaussians(&fit, ridge)?;
    Ok((
        score_mahalanobis(&bank, bench.samples(view_id, SplitName::Val)?)?,
        score_mahalanobis(&bank, bench.samples(view_id, SplitName::Test)?)?,
    ))
}

/// Nested training-outlier subsets: the first `max(1, round(f * n))`
/// entries of one seeded permutation, each returned in ascending order.
pub fn heterogeneity_subsets(outliers: &[u32], fractions: &[f64], seed: u64) -> Result<Vec<Vec<u32>>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("outlier fraction {f} outside (0,1]")));
    }
    let mut perm = outliers.to_vec();
    perm.sort_unstable();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "heterogeneity")));
    Ok(fractions
        .iter()
        .map(|f| {
            let k = ((f * perm.len() as f64).round() as usize).clamp(1, perm.len());
            let mut subset = perm[..k].to_vec();
            subset.sort_unstable();
            subset
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityRow {
    pub fraction: f64,
    pub outlier_classes: usize,
    pub outlier_samples: usize,
    /// Test AUROC of each training seed.
    pub test_auroc: Vec<f64>,
    pub mean_test_auroc: f64,
}

/// HOD heads on one view trained with growing subsets of the training
/// outliers, `num_seeds` heads per fraction.
pub fn heterogeneity_ablation(
    bench: &Benchmark,
    view_id: u32,
    fractions: &[f64],
    num_seeds: usize,
    cfg: &TrainConfig,
    master_seed: u64,
) -> Result<Vec<HeterogeneityRow>> {
    let subsets = heterogeneity_subsets(&bench.train_outliers, fractions, master_seed)?;
    let spec = PoolSpec::new(view_id, LossKind::Hod, num_seeds);
    let members = expand_pool(std::slice::from_ref(&spec));
    let jobs: Vec<(usize, &MemberSpec)> = (0..subsets.len()).flat_map(|f| members.iter().map(move |m| (f, m))).collect();
    let aurocs = jobs
        .par_iter()
        .map(|(f, m)| {
            let (head, _) = train_member(bench, m, Some(&subsets[*f]), cfg, master_seed)?;
            let (_, test) = score_member(bench, &head)?;
            let (inl, out) = split_scores(&test, bench.labels(SplitName::Test))?;
            crate::metrics::auroc(&inl, &out)
        })
        .collect::<Result<Vec<_>>>()?;
    let train = bench.samples(view_id, SplitName::Train)?;
    Ok(fractions
        .iter()
        .zip(&subsets)
        .enumerate()
        .map(|(f, (fraction, subset))| {
            let test_auroc = aurocs[f * num_seeds..(f + 1) * num_seeds].to_vec();
            HeterogeneityRow {
                fraction: *fraction,
                outlier_classes: subset.len(),
                outlier_samples: train
                    .iter()
                    .filter(|s| s.is_outlier && subset.binary_search(&s.label).is_ok())
                    .count(),
                mean_test_auroc: test_auroc.iter().sum::<f64>() / num_seeds.max(1) as f64,
                test_auroc,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_are_nested() {
        let ids: Vec<u32> = (100..120).collect();
        let s = heterogeneity_subsets(&ids, &[0.25, 0.5, 0.75, 1.0], 3).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
        for w in s.windows(2) {
            assert!(w[0].iter().all(|x| w[1].contains(x)));
        }
        assert!(heterogeneity_subsets(&ids, &[0.0], 3).is_err());
    }

    #[test]
    fn pool_expansion_shape() {
        let specs: Vec<PoolSpec> = (0..4)
            .flat_map(|v| [PoolSpec::new(v, LossKind::Hod, 5), PoolSpec::new(v, LossKind::RejectBucket, 5)])
            .collect();
        let members = expand_pool(&specs);
        assert_eq!(members.len(), 40);
        let groups = vanilla_groups(&members);
        assert_eq!(groups.len(), 8);
        assert!(groups.iter().all(|(_, g)| g.len() == 5));
    }
}
