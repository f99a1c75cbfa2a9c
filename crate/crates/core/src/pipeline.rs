//! File-backed experiment runner. Each stage reads the artifacts of the
//! stages it depends on, writes its own artifacts under the experiment
//! directory and records a manifest with the sha256 of every input and
//! output; rerunning a stage whose inputs and configuration are unchanged
//! does nothing.
//!
//! ```text
//! <out>/dataset/{conditions.json,cases.jsonl}
//! <out>/split.json, split_report.json
//! <out>/heads/<model>.json, heads/index.json
//! <out>/scores/<model>.{val,test}.csv, scores/index.json
//! <out>/metrics/<name>.json, curves/<name>.csv, subgroups/<name>.{risk,skin}.csv
//! <out>/ensemble/{diversity.csv,dendrogram.json,selection.json,index.json,<name>.{val,test}.csv}
//! <out>/summary.json, report/...
//! <out>/manifests/<stage>.json
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{BenchmarkSplit, CaseLabel, ConditionTable, Dataset, SplitName};
use crate::ensemble::{
    average_scores, diversity_matrix, greedy_select, ward_dendrogram, write_matrix_csv, ModelTag,
    DEFAULT_ENSEMBLE_SIZE,
};
use crate::error::{Error, Result};
use crate::experiment::{
    expand_pool, heterogeneity_subsets, mahalanobis_baseline, score_member, train_member, Benchmark, MemberSpec,
    PoolSpec,
};
use crate::heads::{HeadCheckpoint, LossKind, TrainConfig};
use crate::metrics::{
    evaluate, evaluate_with_curves, subgroup_report, write_curve_csv, write_subgroup_csv, CostMatrix, CurvePoint,
    MetricReport, SubgroupBy,
};
use crate::scoring::{ScoreKind, ScoreSet, DEFAULT_RIDGE};
use crate::splitter::{build_benchmark, validate_split, SplitConfig, SplitFile};
use crate::synth::{generate_longtail_dataset, SynthConfig, ViewEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; overrides the seeds inside `synth`, `split` and `train`.
    pub seed: u64,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub pool: Vec<PoolSpec>,
    pub ensemble_size: usize,
    pub heterogeneity_fractions: Vec<f64>,
    pub heterogeneity_seeds: usize,
    pub heterogeneity_view: u32,
    pub mahalanobis_ridge: f64,
    pub cost: CostMatrix,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            pool: (0..2)
                .flat_map(|v| [PoolSpec::new(v, LossKind::Hod, 5), PoolSpec::new(v, LossKind::RejectBucket, 5)])
                .collect(),
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            heterogeneity_fractions: vec![0.25, 0.5, 0.75, 1.0],
            heterogeneity_seeds: 1,
            heterogeneity_view: 0,
            mahalanobis_ridge: DEFAULT_RIDGE,
            cost: CostMatrix::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        self.cost.validate()?;
        let views = self.synth.num_views as u32;
        if self.pool.is_empty() || self.pool.iter().any(|p| p.num_seeds == 0) {
            return Err(Error::Config("pool must list at least one spec with num_seeds >= 1".into()));
        }
        if let Some(p) = self.pool.iter().find(|p| p.view_id >= views) {
            return Err(Error::Config(format!("pool refers to view {} but only {views} exist", p.view_id)));
        }
        if self.heterogeneity_view >= views {
            return Err(Error::Config(format!("heterogeneity view {} does not exist", self.heterogeneity_view)));
        }
        if let Some(f) = self.heterogeneity_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("heterogeneity fraction {f} outside (0,1]")));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        if !self.heterogeneity_fractions.is_empty() && self.heterogeneity_seeds == 0 {
            return Err(Error::Config("heterogeneity_seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// The configuration with the master seed pushed into every component.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.synth.seed = self.seed;
        cfg.split.seed = self.seed;
        cfg.train.seed = self.seed;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generate,
    Split,
    Train,
    Score,
    Evaluate,
    Ensemble,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Split,
        Stage::Train,
        Stage::Score,
        Stage::Evaluate,
        Stage::Ensemble,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::Ensemble => "ensemble",
            Stage::Report => "report",
        }
    }

    fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::Split => &[Stage::Generate],
            Stage::Train => &[Stage::Generate, Stage::Split],
            Stage::Score => &[Stage::Generate, Stage::Split, Stage::Train],
            Stage::Evaluate => &[Stage::Generate, Stage::Split, Stage::Score],
            Stage::Ensemble => &[Stage::Generate, Stage::Split, Stage::Train, Stage::Score],
            Stage::Report => &[Stage::Split, Stage::Train, Stage::Score, Stage::Evaluate, Stage::Ensemble],
        }
    }

    /// Configuration slice the stage depends on.
    fn config_key(self, cfg: &ExperimentConfig) -> serde_json::Value {
        use serde_json::json;
        match self {
            Stage::Generate => json!({ "synth": cfg.synth }),
            Stage::Split => json!({ "split": cfg.split }),
            Stage::Train => json!({
                "train": cfg.train,
                "pool": cfg.pool,
                "heterogeneity_fractions": cfg.heterogeneity_fractions,
                "heterogeneity_seeds": cfg.heterogeneity_seeds,
                "heterogeneity_view": cfg.heterogeneity_view,
            }),
            Stage::Score => json!({ "ridge": cfg.mahalanobis_ridge }),
            Stage::Evaluate => json!({ "cost": cfg.cost }),
            Stage::Ensemble => json!({ "size": cfg.ensemble_size, "cost": cfg.cost }),
            Stage::Report => json!({ "seed": cfg.seed }),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn manifest_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join("manifests").join(format!("{}.json", stage.name()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::IncompleteExperiment(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn read_manifest(dir: &Path, stage: Stage) -> Result<Manifest> {
    read_json(&manifest_path(dir, stage))
}

/// Writes artifacts relative to the experiment directory and remembers
/// their paths.
struct Artifacts<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Artifacts<'a> {
    fn new(dir: &'a Path) -> Self {
        Artifacts { dir, written: Vec::new() }
    }

    fn create(&mut self, rel: &str) -> Result<BufWriter<fs::File>> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(rel.to_string());
        Ok(BufWriter::new(fs::File::create(path)?))
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut w = self.create(rel)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn scores(&mut self, rel: &str, scores: &ScoreSet) -> Result<()> {
        scores.write_csv(self.create(rel)?)
    }
}

/// Runs one stage unless its manifest shows unchanged inputs, outputs and
/// configuration. Failures are reported with the stage name.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<StageOutcome> {
    run_stage_inner(cfg, stage).map_err(|e| e.in_stage(stage.name()))
}

fn run_stage_inner(cfg: &ExperimentConfig, stage: Stage) -> Result<StageOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let dir = cfg.out_dir.as_path();
    let mut inputs = BTreeMap::new();
    for dep in stage.dependencies() {
        let m = read_manifest(dir, *dep)
            .map_err(|_| Error::IncompleteExperiment(format!("output of stage `{dep}`")))?;
        for rel in m.outputs.keys() {
            inputs.insert(rel.clone(), sha256_file(&dir.join(rel))?);
        }
    }
    let config_sha256 = sha256_bytes(serde_json::to_string(&stage.config_key(&cfg))?.as_bytes());

    if let Ok(old) = read_manifest(dir, stage) {
        let outputs_intact = old
            .outputs
            .iter()
            .all(|(rel, h)| sha256_file(&dir.join(rel)).is_ok_and(|cur| cur == *h));
        if old.config_sha256 == config_sha256 && old.inputs == inputs && outputs_intact {
            log::info!("stage {stage} is up to date");
            return Ok(StageOutcome::UpToDate);
        }
    }

    fs::create_dir_all(dir)?;
    let mut out = Artifacts::new(dir);
    match stage {
        Stage::Generate => stage_generate(&cfg, &mut out)?,
        Stage::Split => stage_split(&cfg, &mut out)?,
        Stage::Train => stage_train(&cfg, &mut out)?,
        Stage::Score => stage_score(&cfg, &mut out)?,
        Stage::Evaluate => stage_evaluate(&cfg, &mut out)?,
        Stage::Ensemble => stage_ensemble(&cfg, &mut out)?,
        Stage::Report => stage_report(&cfg, &mut out)?,
    }
    let mut outputs = BTreeMap::new();
    for rel in out.written {
        outputs.insert(rel.clone(), sha256_file(&dir.join(&rel))?);
    }
    let manifest = Manifest {
        stage,
        config_sha256,
        inputs,
        outputs,
    };
    Artifacts::new(dir).json(&format!("manifests/{}.json", stage.name()), &manifest)?;
    log::info!("stage {stage} done");
    Ok(StageOutcome::Ran)
}

/// Runs every stage in order and returns the experiment directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PathBuf> {
    for stage in Stage::ALL {
        run_stage(cfg, stage)?;
    }
    Ok(cfg.out_dir.clone())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let table: ConditionTable = read_json(&dir.join("dataset/conditions.json"))?;
    let f = fs::File::open(dir.join("dataset/cases.jsonl"))
        .map_err(|_| Error::IncompleteExperiment("dataset/cases.jsonl".into()))?;
    let cases = Dataset::read_cases(BufReader::new(f))?;
    Ok(Dataset { table, cases })
}

fn load_split(dir: &Path) -> Result<BenchmarkSplit> {
    Ok(read_json::<SplitFile>(&dir.join("split.json"))?.split())
}

fn load_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    let dir = cfg.out_dir.as_path();
    let encoders: Vec<ViewEncoder> = (0..cfg.synth.num_views as u32)
        .map(|v| ViewEncoder::for_config(&cfg.synth, v))
        .collect();
    Benchmark::new(load_dataset(dir)?, load_split(dir)?, &encoders)
}

fn load_scores(dir: &Path, rel: &str) -> Result<ScoreSet> {
    let f = fs::File::open(dir.join(rel)).map_err(|_| Error::IncompleteExperiment(rel.to_string()))?;
    ScoreSet::read_csv(BufReader::new(f))
}

fn stage_generate(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<()> {
    let data = generate_longtail_dataset(&cfg.synth)?;
    out.json("dataset/conditions.json", &data.dataset.table)?;
    let mut w = out.create("dataset/cases.jsonl")?;
    data.dataset.write_cases(&mut w)?;
    w.flush()?;
    Ok(())
}

fn stage_split(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<()> {
    let dataset = load_dataset(out.dir)?;
    let split = build_benchmark(&dataset, &cfg.split)?;
    out.json("split.json", &SplitFile::new(&split, &cfg.split))?;
    out.json("split_report.json", &validate_split(&dataset, &split, &cfg.split))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Model,
    Heterogeneity,
    Baseline,
    Vanilla,
    Diverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub name: String,
    pub kind: EntryKind,
    pub config_name: String,
    pub tag: ModelTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    pub outlier_classes: usize,
    pub best_step: usize,
    pub val_auroc: Option<f64>,
}

fn stage_train(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<()> {
    let bench = load_benchmark(cfg)?;
    // (member, kind, heterogeneity fraction, training outlier subset)
    type Job = (MemberSpec, EntryKind, Option<f64>, Option<Vec<u32>>);
    let mut jobs: Vec<Job> = expand_pool(&cfg.pool)
        .into_iter()
        .map(|m| (m, EntryKind::Model, None, None))
        .collect();
    let subsets = heterogeneity_subsets(&bench.train_outliers, &cfg.heterogeneity_fractions, cfg.seed)?;
    let hetero = PoolSpec::new(cfg.heterogeneity_view, LossKind::Hod, cfg.heterogeneity_seeds);
    for (fraction, subset) in cfg.heterogeneity_fractions.iter().zip(subsets) {
        for mut m in expand_pool(std::slice::from_ref(&hetero)) {
            m.config_name = format!("hetero-f{fraction}-{}", m.config_name);
            jobs.push((m, EntryKind::Heterogeneity, Some(*fraction), Some(subset.clone())));
        }
    }
    let trained = jobs
        .par_iter()
        .map(|(m, _, _, subset)| train_member(&bench, m, subset.as_deref(), &cfg.train, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut index = Vec::new();
    for ((m, kind, fraction, subset), (head, trace)) in jobs.iter().zip(trained) {
        let name = m.name();
        out.json(
            &format!("heads/{name}.json"),
            &HeadCheckpoint::from_head(&head, trace.best_val_auroc),
        )?;
        index.push(HeadEntry {
            name,
            kind: *kind,
            config_name: m.config_name.clone(),
            tag: m.tag,
            lambda: m.lambda,
            fraction: *fraction,
            outlier_classes: subset.as_ref().map_or(bench.train_outliers.len(), Vec::len),
            best_step: trace.best_step,
            val_auroc: trace.best_val_auroc,
        });
    }
    out.json("heads/index.json", &index)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub name: String,
    pub kind: EntryKind,
    pub val: String,
    pub test: String,
}

fn stage_score(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<()> {
    let bench = load_benchmark(cfg)?;
    let heads: Vec<HeadEntry> = read_json(&out.dir.join("heads/index.json"))?;
    let scored = heads
        .par_iter()
        .map(|h| {
            let ckpt: HeadCheckpoint = read_json(&out.dir.join(format!("heads/{}.json", h.name)))?;
            score_member(&bench, &ckpt.into_head()?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut index = Vec::new();
    for (h, (val, test)) in heads.iter().zip(&scored) {
        index.push(write_score_pair(out, "scores", &h.name, h.kind, val, test)?);
    }
    for view in 0..cfg.synth.num_views as u32 {
        let (val, test) = mahalanobis_baseline(&bench, view, cfg.mahalanobis_ridge)?;
        index.push(write_score_pair(out, "scores", &format!("mahalanobis-v{view}"), EntryKind::Baseline, &val, &test)?);
    }
    out.json("scores/index.json", &index)?;
    Ok(())
}

fn write_score_pair(
    out: &mut Artifacts,
    folder: &str,
    name: &str,
    kind: EntryKind,
    val: &ScoreSet,
    test: &ScoreSet,
) -> Result<ScoreEntry> {
    let entry = ScoreEntry {
        name: name.to_string(),
        kind,
        val: format!("{folder}/{name}.val.csv"),
        test: format!("{folder}/{name}.test.csv"),
    };
    out.scores(&entry.val, val)?;
    out.scores(&entry.test, test)?;
    Ok(entry)
}

/// Val metrics, test metrics with curves, and the test-split subgroup and
/// curve tables.
fn write_evaluation(
    out: &mut Artifacts,
    name: &str,
    val: &ScoreSet,
    test: &ScoreSet,
    labels: &[Vec<CaseLabel>; 3],
    cm: &CostMatrix,
) -> Result<()> {
    let test_labels = &labels[SplitName::Test.index()];
    let report = EntryMetrics {
        val: evaluate(val, &labels[SplitName::Val.index()])?,
        test: evaluate_with_curves(test, test_labels, cm)?,
    };
    if let Some(curve) = &report.test.curve {
        write_curve_csv(curve, out.create(&format!("curves/{name}.csv"))?)?;
    }
    for (by, suffix) in [(SubgroupBy::Risk, "risk"), (SubgroupBy::SkinType, "skin")] {
        let rows = subgroup_report(test, test_labels, by)?;
        write_subgroup_csv(&rows, out.create(&format!("subgroups/{name}.{suffix}.csv"))?)?;
    }
    out.json(&format!("metrics/{name}.json"), &report)
}

fn split_labels(dir: &Path) -> Result<[Vec<CaseLabel>; 3]> {
    let dataset = load_dataset(dir)?;
    let split = load_split(dir)?;
    Ok([
        dataset.labels_for(&split.train)?,
        dataset.labels_for(&split.val)?,
        dataset.labels_for(&split.test)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMetrics {
    pub val: MetricReport,
    pub test: MetricReport,
}

fn stage_evaluate(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<()> {
    let labels = split_labels(out.dir)?;
    let entries: Vec<ScoreEntry> = read_json(&out.dir.join("scores/index.json"))?;
    for e in &entries {
        let val = load_scores(out.dir, &e.val)?;
        let test = load_scores(out.dir, &e.test)?;
        write_evaluation(out, &e.name, &val, &test, &labels, &cfg.cost)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEntry {
    pub name: String,
    pub kind: EntryKind,
    pub members: Vec<String>,
    pub val: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub size: usize,
    pub member_ids: Vec<usize>,
    pub order: Vec<usize>,
    pub per_step_criterion: Vec<f64>,
    pub member_names: Vec<String>,
}

fn stage_ensemble(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<()> {
    let labels = split_labels(out.dir)?;
    let heads: Vec<HeadEntry> = read_json(&out.dir.join("heads/index.json"))?;
    let pool: Vec<&HeadEntry> = heads.iter().filter(|h| h.kind == EntryKind::Model).collect();
    let val = pool
        .iter()
        .map(|h| load_scores(out.dir, &format!("scores/{}.val.csv", h.name)))
        .collect::<Result<Vec<_>>>()?;
    let test = pool
        .iter()
        .map(|h| load_scores(out.dir, &format!("scores/{}.test.csv", h.name)))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = pool.iter().map(|h| h.name.clone()).collect();
    let mut index = Vec::new();

    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, h) in pool.iter().enumerate() {
        match groups.iter_mut().find(|(n, _)| *n == h.config_name) {
            Some((_, g)) => g.push(i),
            None => groups.push((h.config_name.clone(), vec![i])),
        }
    }
    let mut emit = |out: &mut Artifacts, name: String, kind: EntryKind, members: &[usize]| -> Result<()> {
        let v = average_scores(&members.iter().map(|&i| &val[i]).collect::<Vec<_>>())?;
        let t = average_scores(&members.iter().map(|&i| &test[i]).collect::<Vec<_>>())?;
        let e = write_score_pair(out, "ensemble", &name, kind, &v, &t)?;
        write_evaluation(out, &name, &v, &t, &labels, &cfg.cost)?;
        index.push(EnsembleEntry {
            name,
            kind,
            members: members.iter().map(|&i| names[i].clone()).collect(),
            val: e.val,
            test: e.test,
        });
        Ok(())
    };
    for (config, members) in &groups {
        emit(out, format!("vanilla-{config}"), EntryKind::Vanilla, members)?;
    }
    let selection = greedy_select(
        &val.iter().collect::<Vec<_>>(),
        &labels[SplitName::Val.index()],
        cfg.ensemble_size,
    )?;
    emit(out, "diverse".to_string(), EntryKind::Diverse, &selection.order)?;
    out.json(
        "ensemble/selection.json",
        &SelectionFile {
            member_names: selection.order.iter().map(|&i| names[i].clone()).collect(),
            size: selection.size,
            member_ids: selection.member_ids,
            order: selection.order,
            per_step_criterion: selection.per_step_criterion,
        },
    )?;

    if pool.len() >= 2 {
        let matrix = diversity_matrix(&test.iter().collect::<Vec<_>>())?;
        write_matrix_csv(&names, &matrix, out.create("ensemble/diversity.csv")?)?;
        out.json("ensemble/dendrogram.json", &ward_dendrogram(&matrix)?)?;
    }
    out.json("ensemble/index.json", &index)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub name: String,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<ModelTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<String>,
    pub val: MetricReport,
    pub test: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneitySummary {
    pub fraction: f64,
    pub outlier_classes: usize,
    pub mean_test_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub split_cases: [usize; 3],
    pub split_outlier_classes: [usize; 3],
    pub entries: Vec<SummaryEntry>,
    pub heterogeneity: Vec<HeterogeneitySummary>,
    pub selection: SelectionFile,
}

impl Summary {
    pub fn entry(&self, name: &str) -> Option<&SummaryEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn read(path: &Path) -> Result<Summary> {
        read_json(path)
    }
}

fn strip(mut m: MetricReport) -> MetricReport {
    m.roc = None;
    m.curve = None;
    m
}

fn stage_report(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<()> {
    let dir = out.dir;
    let split = load_split(dir)?;
    let heads: Vec<HeadEntry> = read_json(&dir.join("heads/index.json"))?;
    let scores: Vec<ScoreEntry> = read_json(&dir.join("scores/index.json"))?;
    let ensembles: Vec<EnsembleEntry> = read_json(&dir.join("ensemble/index.json"))?;
    let metrics = |name: &str| -> Result<EntryMetrics> { read_json(&dir.join(format!("metrics/{name}.json"))) };

    let mut entries = Vec::new();
    for s in &scores {
        let m = metrics(&s.name)?;
        let head = heads.iter().find(|h| h.name == s.name);
        entries.push(SummaryEntry {
            name: s.name.clone(),
            kind: s.kind,
            tag: head.map(|h| h.tag),
            fraction: head.and_then(|h| h.fraction),
            members: Vec::new(),
            val: strip(m.val),
            test: strip(m.test),
        });
    }
    for e in &ensembles {
        let m = metrics(&e.name)?;
        entries.push(SummaryEntry {
            name: e.name.clone(),
            kind: e.kind,
            tag: None,
            fraction: None,
            members: e.members.clone(),
            val: strip(m.val),
            test: strip(m.test),
        });
    }

    let heterogeneity = cfg
        .heterogeneity_fractions
        .iter()
        .map(|f| {
            let rows: Vec<&SummaryEntry> = entries
                .iter()
                .filter(|e| e.kind == EntryKind::Heterogeneity && e.fraction == Some(*f))
                .collect();
            let classes = heads
                .iter()
                .find(|h| h.kind == EntryKind::Heterogeneity && h.fraction == Some(*f))
                .map_or(0, |h| h.outlier_classes);
            HeterogeneitySummary {
                fraction: *f,
                outlier_classes: classes,
                mean_test_auroc: rows.iter().map(|e| e.test.auroc).sum::<f64>() / rows.len().max(1) as f64,
            }
        })
        .collect();

    let summary = Summary {
        seed: cfg.seed,
        split_cases: [split.train.len(), split.val.len(), split.test.len()],
        split_outlier_classes: SplitName::ALL.map(|s| split.outlier_conditions(s).len()),
        entries,
        heterogeneity,
        selection: read_json(&dir.join("ensemble/selection.json"))?,
    };
    out.json("summary.json", &summary)?;
    emit_report_into(dir, ReportFormat::Csv, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            _ => Err(Error::InvalidInput(format!("unknown report format `{s}`"))),
        }
    }
}

/// Writes report tables for a finished experiment: `csv` gives long-format
/// metrics, the heterogeneity table and the per-case scatter export; `json`
/// gives the metric table as JSON; `svg` gives the CSV tables plus line
/// charts of accuracy and cost against outlier recall.
pub fn emit_report(dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    let mut out = Artifacts::new(dir);
    emit_report_into(dir, format, &mut out)?;
    Ok(out.written.iter().map(|r| dir.join(r)).collect())
}

fn emit_report_into(dir: &Path, format: ReportFormat, out: &mut Artifacts) -> Result<()> {
    let summary_path = dir.join("summary.json");
    if !summary_path.exists() {
        return Err(Error::IncompleteExperiment("summary.json".into()));
    }
    let summary = Summary::read(&summary_path)?;
    let rows: Vec<(String, &'static str, f64)> = summary
        .entries
        .iter()
        .flat_map(|e| {
            [
                ("auroc", e.test.auroc),
                ("fpr_at_95_tpr", e.test.fpr_at_95_tpr),
                ("aupr_in", e.test.aupr_in),
                ("inlier_accuracy", e.test.inlier_accuracy),
            ]
            .map(|(m, v)| (e.name.clone(), m, v))
        })
        .collect();

    if format == ReportFormat::Json {
        let table: Vec<serde_json::Value> = rows
            .iter()
            .map(|(n, m, v)| serde_json::json!({ "name": n, "metric": m, "value": v }))
            .collect();
        return out.json("report/metrics.json", &table);
    }

    let mut w = csv::Writer::from_writer(out.create("report/metrics.csv")?);
    w.write_record(["name", "metric", "value"])?;
    for (n, m, v) in &rows {
        w.write_record([n.as_str(), m, &v.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(out.create("report/heterogeneity.csv")?);
    w.write_record(["fraction", "outlier_classes", "mean_test_auroc"])?;
    for h in &summary.heterogeneity {
        w.write_record([h.fraction.to_string(), h.outlier_classes.to_string(), h.mean_test_auroc.to_string()])?;
    }
    w.flush()?;

    let (baseline, candidate) = scatter_pair(&summary)?;
    let b = load_scores(dir, &scores_path(&summary, &baseline))?;
    let c = load_scores(dir, &scores_path(&summary, &candidate))?;
    b.check_aligned(&c)?;
    let mut w = csv::Writer::from_writer(out.create("report/scatter.csv")?);
    w.write_record(["case_id", &format!("u_{baseline}"), &format!("u_{candidate}")])?;
    for (rb, rc) in b.rows.iter().zip(&c.rows) {
        w.write_record([rb.case_id.to_string(), rb.ood_score.to_string(), rc.ood_score.to_string()])?;
    }
    w.flush()?;

    if format == ReportFormat::Svg {
        let curves = [&baseline, &candidate]
            .into_iter()
            .map(|n| Ok((n.clone(), read_curve(&dir.join(format!("curves/{n}.csv")))?)))
            .collect::<Result<Vec<_>>>()?;
        let acc: Vec<(String, Vec<(f64, f64)>)> = curves
            .iter()
            .map(|(n, c)| (n.clone(), c.iter().filter_map(|p| Some((p.outlier_recall?, p.accuracy?))).collect()))
            .collect();
        let cost: Vec<(String, Vec<(f64, f64)>)> = curves
            .iter()
            .map(|(n, c)| (n.clone(), c.iter().filter_map(|p| Some((p.outlier_recall?, p.cost))).collect()))
            .collect();
        line_chart_svg(&acc, "outlier recall", "selective accuracy", out.create("report/accuracy_vs_recall.svg")?)?;
        line_chart_svg(&cost, "outlier recall", "cost", out.create("report/cost_vs_recall.svg")?)?;
    }
    Ok(())
}

fn scores_path(summary: &Summary, name: &str) -> String {
    match summary.entry(name).map(|e| e.kind) {
        Some(EntryKind::Vanilla | EntryKind::Diverse) => format!("ensemble/{name}.test.csv"),
        _ => format!("scores/{name}.test.csv"),
    }
}

/// Baseline: the first reject-bucket model (else the first model);
/// candidate: the diverse ensemble.
fn scatter_pair(summary: &Summary) -> Result<(String, String)> {
    let models = || summary.entries.iter().filter(|e| e.kind == EntryKind::Model);
    let baseline = models()
        .find(|e| e.tag.is_some_and(|t| t.loss_kind == LossKind::RejectBucket))
        .or_else(|| models().next())
        .ok_or_else(|| Error::IncompleteExperiment("no trained models in summary".into()))?;
    Ok((baseline.name.clone(), "diverse".to_string()))
}

fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let f = fs::File::open(path).map_err(|_| Error::IncompleteExperiment(path.display().to_string()))?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(f));
    let opt = |s: &str| s.parse::<f64>().ok();
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        points.push(CurvePoint {
            tau: opt(&rec[0]).unwrap_or(f64::NAN),
            outlier_recall: opt(&rec[1]),
            accuracy: opt(&rec[2]),
            cost: opt(&rec[3]).unwrap_or(f64::NAN),
        });
    }
    Ok(points)
}

fn line_chart_svg<W: Write>(series: &[(String, Vec<(f64, f64)>)], x_label: &str, y_label: &str, mut w: W) -> Result<()> {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, y) in pts {
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !(y1 > y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| PAD + x * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-size="11">"#)?;
    writeln!(
        w,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    )?;
    writeln!(w, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 8.0)?;
    writeln!(w, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{y_label}</text>"#, H / 2.0, H / 2.0)?;
    writeln!(w, r#"<text x="{PAD}" y="{}">{y1:.3}</text><text x="{PAD}" y="{}">{y0:.3}</text>"#, PAD - 4.0, H - PAD + 14.0)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let points: Vec<String> = sorted.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        writeln!(w, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, points.join(" "))?;
        writeln!(w, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, PAD + 6.0, PAD + 14.0 * (i as f64 + 1.0))?;
    }
    writeln!(w, "</svg>")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// One-sided `P(X >= positive)` for `X ~ Binomial(positive + negative, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(deltas: &[f64]) -> SignTest {
    let positive = deltas.iter().filter(|d| **d > 0.0).count();
    let negative = deltas.iter().filter(|d| **d < 0.0).count();
    let n = positive + negative;
    let mut p = 0.0;
    let mut choose = 1.0f64;
    for k in 0..=n {
        if k >= positive {
            p += choose;
        }
        choose = choose * (n - k) as f64 / (k + 1) as f64;
    }
    SignTest {
        positive,
        negative,
        ties: deltas.len() - n,
        p_value: p / 2f64.powi(n as i32),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub a: String,
    pub b: String,
    pub auroc: f64,
    pub fpr_at_95_tpr: f64,
    pub aupr_in: f64,
    pub inlier_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    /// `b - a` test metrics per matched pair.
    pub pairs: Vec<PairDelta>,
    pub auroc: SignTest,
    pub fpr_at_95_tpr: SignTest,
    pub aupr_in: SignTest,
    pub inlier_accuracy: SignTest,
}

/// Pairs the test metrics of trained models in two runs over the same
/// benchmark seed. Models are matched by name; when no names are shared
/// they are matched by (view, seed).
pub fn compare<'a>(a: &'a Summary, b: &'a Summary) -> Result<Comparison> {
    if a.seed != b.seed {
        return Err(Error::IncomparableRuns(format!("benchmark seeds {} and {}", a.seed, b.seed)));
    }
    let models = |s: &'a Summary| s.entries.iter().filter(|e| e.kind == EntryKind::Model);
    let mut pairs: Vec<(&SummaryEntry, &SummaryEntry)> = models(a)
        .filter_map(|ea| models(b).find(|eb| eb.name == ea.name).map(|eb| (ea, eb)))
        .collect();
    if pairs.is_empty() {
        let key = |e: &SummaryEntry| e.tag.filter(|_| e.kind == EntryKind::Model).map(|t| (t.view_id, t.seed));
        let unique = |s: &Summary| {
            let keys: Vec<_> = s.entries.iter().filter_map(key).collect();
            let mut sorted = keys.clone();
            sorted.sort_unstable();
            sorted.dedup();
            sorted.len() == keys.len()
        };
        if !unique(a) || !unique(b) {
            return Err(Error::IncomparableRuns("no shared entry names and models are not unique per (view, seed)".into()));
        }
        pairs = a
            .entries
            .iter()
            .filter_map(|ea| {
                let k = key(ea)?;
                b.entries.iter().find(|eb| key(eb) == Some(k)).map(|eb| (ea, eb))
            })
            .collect();
    }
    if pairs.is_empty() {
        return Err(Error::IncomparableRuns("no matching entries".into()));
    }
    let pairs: Vec<PairDelta> = pairs
        .into_iter()
        .map(|(ea, eb)| PairDelta {
            a: ea.name.clone(),
            b: eb.name.clone(),
            auroc: eb.test.auroc - ea.test.auroc,
            fpr_at_95_tpr: eb.test.fpr_at_95_tpr - ea.test.fpr_at_95_tpr,
            aupr_in: eb.test.aupr_in - ea.test.aupr_in,
            inlier_accuracy: eb.test.inlier_accuracy - ea.test.inlier_accuracy,
        })
        .collect();
    let test = |f: fn(&PairDelta) -> f64| sign_test(&pairs.iter().map(f).collect::<Vec<_>>());
    Ok(Comparison {
        seed: a.seed,
        auroc: test(|p| p.auroc),
        fpr_at_95_tpr: test(|p| -p.fpr_at_95_tpr),
        aupr_in: test(|p| p.aupr_in),
        inlier_accuracy: test(|p| p.inlier_accuracy),
        pairs,
    })
}

/// Probability score sets only; distance scores have no [0,1] curve.
pub fn is_probability(scores: &ScoreSet) -> bool {
    scores.kind == ScoreKind::Probability
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_exact() {
        let t = sign_test(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!((t.positive, t.negative, t.p_value), (5, 0, 1.0 / 32.0));
        assert_eq!(sign_test(&[0.1, 0.2, 0.3, 0.4, -0.5]).p_value, 6.0 / 32.0);
        let t = sign_test(&[0.0, 0.0]);
        assert_eq!((t.ties, t.p_value), (2, 1.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.pool[0].view_id = 7;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ExperimentConfig {
            heterogeneity_fractions: vec![0.0],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
    }

    #[test]
    fn report_needs_summary() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(dir.path(), ReportFormat::Csv),
            Err(Error::IncompleteExperiment(_))
        ));
    }

    #[test]
    fn missing_dependency_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        let err = run_stage(&cfg, Stage::Train).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }
}
