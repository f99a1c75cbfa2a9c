//! Benchmark construction: outlier conditions are assigned whole to one of
//! train / val / test, inlier cases are split by patient close to 80/10/10,
//! and any split can be audited against the six desiderata:
//!
//! 1. patients do not overlap between splits;
//! 2. outlier conditions do not overlap between splits;
//! 3. outlier sample counts are close to their targets;
//! 4. outlier class counts are close to their targets;
//! 5. risk distributions of the outlier cases are similar across splits;
//! 6. skin-type distributions of the cases are similar across splits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::domain::{BenchmarkSplit, ConditionTable, Dataset, LabeledCase, RiskLevel, SplitName};
use crate::error::{Error, Result};

const N_RISK: usize = 3;
const N_SKIN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub samples: f64,
    pub classes: f64,
    pub risk: f64,
    pub skin: f64,
}

impl Default for BalanceWeights {
    fn default() -> Self {
        BalanceWeights {
            samples: 1.0,
            classes: 100.0,
            risk: 1.0,
            skin: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub inlier_ratios: [f64; 3],
    pub outlier_target_fractions: [f64; 3],
    pub balance_weights: BalanceWeights,
    pub tolerance: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            inlier_ratios: [0.8, 0.1, 0.1],
            outlier_target_fractions: [1.0 / 3.0; 3],
            balance_weights: BalanceWeights::default(),
            tolerance: 0.15,
            max_attempts: 100,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let sums_to_one = |v: &[f64; 3]| v.iter().all(|x| *x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if !sums_to_one(&self.inlier_ratios) || !sums_to_one(&self.outlier_target_fractions) {
            return Err(Error::Config("split ratios must be non-negative and sum to 1".into()));
        }
        let w = &self.balance_weights;
        if [w.samples, w.classes, w.risk, w.skin].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("balance weights must be non-negative".into()));
        }
        if !(self.tolerance >= 0.0) || self.max_attempts == 0 {
            return Err(Error::Config("tolerance must be >= 0 and max_attempts positive".into()));
        }
        Ok(())
    }
}

/// Per-condition totals the outlier assignment balances.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierConditionStats {
    pub id: u32,
    pub samples: usize,
    pub risk: RiskLevel,
    pub skin: [usize; N_SKIN],
}

pub fn outlier_condition_stats(table: &ConditionTable, cases: &[LabeledCase]) -> Result<Vec<OutlierConditionStats>> {
    let mut stats: BTreeMap<u32, OutlierConditionStats> = table
        .outlier_ids()
        .into_iter()
        .map(|id| {
            let risk = table.get(id).map(|c| c.risk).unwrap_or(RiskLevel::Low);
            (
                id,
                OutlierConditionStats {
                    id,
                    samples: 0,
                    risk,
                    skin: [0; N_SKIN],
                },
            )
        })
        .collect();
    for case in cases {
        if table.get(case.condition_id).is_none() {
            return Err(Error::UnknownLabel(case.condition_id));
        }
        if let Some(s) = stats.get_mut(&case.condition_id) {
            s.samples += 1;
            s.skin[case.skin_type.index()] += 1;
        }
    }
    Ok(stats.into_values().collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
struct SplitTally {
    samples: usize,
    classes: usize,
    risk: [usize; N_RISK],
    skin: [usize; N_SKIN],
}

impl SplitTally {
    fn add(&mut self, s: &OutlierConditionStats) {
        self.samples += s.samples;
        self.classes += 1;
        self.risk[s.risk.index()] += s.samples;
        for (a, b) in self.skin.iter_mut().zip(&s.skin) {
            *a += b;
        }
    }
}

struct Totals {
    samples: f64,
    classes: f64,
    risk: [f64; N_RISK],
    skin: [f64; N_SKIN],
}

fn totals(stats: &[OutlierConditionStats]) -> Totals {
    let mut t = Totals {
        samples: 0.0,
        classes: stats.len() as f64,
        risk: [0.0; N_RISK],
        skin: [0.0; N_SKIN],
    };
    for s in stats {
        t.samples += s.samples as f64;
        t.risk[s.risk.index()] += s.samples as f64;
        for (a, b) in t.skin.iter_mut().zip(&s.skin) {
            *a += *b as f64;
        }
    }
    t
}

/// Weighted imbalance of three split tallies. Sample and class counts
/// contribute squared deviations from their targets; risk and skin
/// contribute L1 distances between each split's category counts and its
/// target counts. Every term is normalized by the corresponding total.
fn objective(tallies: &[SplitTally; 3], totals: &Totals, cfg: &SplitConfig) -> f64 {
    let w = &cfg.balance_weights;
    let f = &cfg.outlier_target_fractions;
    let norm = |x: f64| if x > 0.0 { x } else { 1.0 };
    let mut sample_term = 0.0;
    let mut class_term = 0.0;
    let mut risk_term = 0.0;
    let mut skin_term = 0.0;
    for (s, t) in tallies.iter().enumerate() {
        sample_term += ((t.samples as f64 - f[s] * totals.samples) / norm(totals.samples)).powi(2);
        class_term += ((t.classes as f64 - f[s] * totals.classes) / norm(totals.classes)).powi(2);
        for r in 0..N_RISK {
            risk_term += (t.risk[r] as f64 - f[s] * totals.risk[r]).abs() / norm(totals.samples);
        }
        for k in 0..N_SKIN {
            skin_term += (t.skin[k] as f64 - f[s] * totals.skin[k]).abs() / norm(totals.samples);
        }
    }
    w.samples * sample_term + w.classes * class_term + w.risk * risk_term + w.skin * skin_term
}

/// Objective value of a complete assignment (`assignment[i]` is the split
/// of `stats[i]`).
pub fn assignment_objective(stats: &[OutlierConditionStats], assignment: &[SplitName], cfg: &SplitConfig) -> f64 {
    let mut tallies: [SplitTally; 3] = Default::default();
    for (s, split) in stats.iter().zip(assignment) {
        tallies[split.index()].add(s);
    }
    objective(&tallies, &totals(stats), cfg)
}

/// Greedily assigns each outlier condition, largest first, to the split
/// that minimizes the imbalance objective (ties broken at random from
/// `cfg.seed`), then improves the result with single moves and pairwise
/// swaps until no move lowers the objective. If the outlier-side
/// desiderata still fail, a seeded annealing pass searches for an
/// assignment that meets them.
pub fn assign_outlier_conditions(
    table: &ConditionTable,
    cases: &[LabeledCase],
    cfg: &SplitConfig,
) -> Result<BTreeMap<u32, SplitName>> {
    assign_with_order(table, cases, cfg, false)
}

fn assign_with_order(
    table: &ConditionTable,
    cases: &[LabeledCase],
    cfg: &SplitConfig,
    shuffled: bool,
) -> Result<BTreeMap<u32, SplitName>> {
    cfg.validate()?;
    let stats = outlier_condition_stats(table, cases)?;
    if stats.len() < 3 {
        return Err(Error::InsufficientOutliers { found: stats.len() });
    }
    let tot = totals(&stats);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "outlier-assignment"));
    let mut order: Vec<usize> = (0..stats.len()).collect();
    if shuffled {
        order.shuffle(&mut rng);
    } else {
        order.sort_by(|&a, &b| stats[b].samples.cmp(&stats[a].samples).then(stats[a].id.cmp(&stats[b].id)));
    }

    let mut tallies: [SplitTally; 3] = Default::default();
    let mut assignment = vec![SplitName::Train; stats.len()];
    for i in order {
        let cond = &stats[i];
        let scores: Vec<f64> = SplitName::ALL
            .iter()
            .map(|s| {
                let mut trial = tallies.clone();
                trial[s.index()].add(cond);
                objective(&trial, &tot, cfg)
            })
            .collect();
        let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let tied: Vec<SplitName> = SplitName::ALL
            .iter()
            .zip(&scores)
            .filter(|(_, v)| **v <= best + 1e-12)
            .map(|(s, _)| *s)
            .collect();
        let choice = *tied.choose(&mut rng).expect("at least one split");
        tallies[choice.index()].add(cond);
        assignment[i] = choice;
    }
    refine(&stats, &mut assignment, cfg, false);
    if violation(&stats, &assignment, cfg) > 1.0 {
        // swaps first so the class counts stay put, then free moves
        repair(&stats, &mut assignment, cfg, 1.0);
        if violation(&stats, &assignment, cfg) > 1.0 {
            repair(&stats, &mut assignment, cfg, 0.9);
        }
        if violation(&stats, &assignment, cfg) <= 1.0 {
            refine(&stats, &mut assignment, cfg, true);
        }
    }
    Ok(stats.iter().map(|s| s.id).zip(assignment).collect())
}

/// Largest outlier-side measure (sample and class deviation, risk L1)
/// relative to the tolerance; at most 1 when all of them pass.
fn violation(stats: &[OutlierConditionStats], assignment: &[SplitName], cfg: &SplitConfig) -> f64 {
    let mut samples = [0usize; 3];
    let mut classes = [0usize; 3];
    let mut risk = [[0usize; N_RISK]; 3];
    for (s, a) in stats.iter().zip(assignment) {
        samples[a.index()] += s.samples;
        classes[a.index()] += 1;
        risk[a.index()][s.risk.index()] += s.samples;
    }
    let f = &cfg.outlier_target_fractions;
    let worst = pairwise_l1(&risk)
        .iter()
        .map(|d| d.unwrap_or(2.0))
        .fold(0.0, f64::max)
        .max(max_deviation(&samples, samples.iter().sum(), f))
        .max(max_deviation(&classes, stats.len(), f));
    worst / cfg.tolerance.max(1e-12)
}

/// Seeded simulated annealing on [`violation`], keeping the best
/// assignment seen. Proposals are pairwise swaps with probability
/// `swap_share` and single moves otherwise.
fn repair(stats: &[OutlierConditionStats], assignment: &mut [SplitName], cfg: &SplitConfig, swap_share: f64) {
    const ITERATIONS: usize = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "repair"));
    let mut current = assignment.to_vec();
    let mut cur = violation(stats, &current, cfg);
    let mut best = cur;
    let mut temp = 0.5;
    for _ in 0..ITERATIONS {
        if best <= 1.0 {
            break;
        }
        // mostly swaps, which keep the class counts
        let i = rng.random_range(0..stats.len());
        let j = rng.random_range(0..stats.len());
        let undo = (current[i], current[j]);
        if rng.random_bool(swap_share) {
            current.swap(i, j);
        } else {
            current[i] = SplitName::ALL[rng.random_range(0..3)];
        }
        let v = violation(stats, &current, cfg);
        if v <= cur || rng.random::<f64>() < ((cur - v) / temp).exp() {
            cur = v;
            if v < best {
                best = v;
                assignment.copy_from_slice(&current);
            }
        } else {
            (current[i], current[j]) = undo;
        }
        temp *= 0.9997;
    }
}

/// Best-improvement local search over single moves and pairwise swaps.
/// With `keep_feasible`, only moves that keep [`violation`] at most 1 count.
fn refine(stats: &[OutlierConditionStats], assignment: &mut [SplitName], cfg: &SplitConfig, keep_feasible: bool) {
    let score = |a: &[SplitName]| assignment_objective(stats, a, cfg);
    let mut current = score(assignment);
    loop {
        let mut best: Option<(f64, Vec<SplitName>)> = None;
        let consider = |trial: Vec<SplitName>, best: &mut Option<(f64, Vec<SplitName>)>| {
            let v = score(&trial);
            if v < current - 1e-12
                && best.as_ref().is_none_or(|(b, _)| v < *b)
                && (!keep_feasible || violation(stats, &trial, cfg) <= 1.0)
            {
                *best = Some((v, trial));
            }
        };
        for i in 0..stats.len() {
            for s in SplitName::ALL {
                if s != assignment[i] {
                    let mut trial = assignment.to_vec();
                    trial[i] = s;
                    consider(trial, &mut best);
                }
            }
            for j in i + 1..stats.len() {
                if assignment[i] != assignment[j] {
                    let mut trial = assignment.to_vec();
                    trial.swap(i, j);
                    consider(trial, &mut best);
                }
            }
        }
        match best {
            Some((v, trial)) => {
                current = v;
                assignment.copy_from_slice(&trial);
            }
            None => return,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InlierSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Splits inlier cases by patient towards the configured ratios per
/// condition.
pub fn split_inliers(cases: &[LabeledCase], cfg: &SplitConfig) -> Result<InlierSplit> {
    split_inliers_pinned(cases, &BTreeMap::new(), cfg)
}

/// As [`split_inliers`], with some patients forced into a split.
fn split_inliers_pinned(
    cases: &[LabeledCase],
    pinned: &BTreeMap<u64, SplitName>,
    cfg: &SplitConfig,
) -> Result<InlierSplit> {
    cfg.validate()?;
    let mut out = InlierSplit::default();
    let mut by_patient: BTreeMap<u64, Vec<&LabeledCase>> = BTreeMap::new();
    let mut patients_of: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
    let mut cases_of: BTreeMap<u32, usize> = BTreeMap::new();
    for c in cases {
        by_patient.entry(c.patient_id).or_default().push(c);
        patients_of.entry(c.condition_id).or_default().insert(c.patient_id);
        *cases_of.entry(c.condition_id).or_default() += 1;
    }

    let mut forced = pinned.clone();
    for (cond, patients) in &patients_of {
        if patients.len() < 3 {
            out.warnings.push(format!(
                "condition {cond} has only {} patient(s); all its cases go to train",
                patients.len()
            ));
            for p in patients {
                forced.entry(*p).or_insert(SplitName::Train);
            }
        }
    }

    let mut current: BTreeMap<(u32, SplitName), f64> = BTreeMap::new();
    let mut free: Vec<u64> = Vec::new();
    for (p, group) in &by_patient {
        match forced.get(p) {
            Some(s) => place(group, *s, &mut current, &mut out),
            None => free.push(*p),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "inlier-split"));
    free.shuffle(&mut rng);
    free.sort_by_key(|p| std::cmp::Reverse(by_patient[p].len()));

    for p in free {
        let group = &by_patient[&p];
        let mut best = SplitName::Train;
        let mut best_room = f64::NEG_INFINITY;
        for s in SplitName::ALL {
            let room: f64 = group
                .iter()
                .map(|c| {
                    let target = cfg.inlier_ratios[s.index()] * cases_of[&c.condition_id] as f64;
                    target - current.get(&(c.condition_id, s)).copied().unwrap_or(0.0)
                })
                .sum();
            if room > best_room {
                best_room = room;
                best = s;
            }
        }
        place(group, best, &mut current, &mut out);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

fn place(
    patient: &[&LabeledCase],
    split: SplitName,
    current: &mut BTreeMap<(u32, SplitName), f64>,
    out: &mut InlierSplit,
) {
    for c in patient {
        *current.entry((c.condition_id, split)).or_default() += 1.0;
        match split {
            SplitName::Train => out.train.push(c.case_id),
            SplitName::Val => out.val.push(c.case_id),
            SplitName::Test => out.test.push(c.case_id),
        }
    }
}

/// One attempt: assign outlier conditions, then split inliers around the
/// patients already pinned by their outlier cases.
fn build_once(dataset: &Dataset, cfg: &SplitConfig, shuffled: bool) -> Result<(BenchmarkSplit, Vec<String>)> {
    let assignment = assign_with_order(&dataset.table, &dataset.cases, cfg, shuffled)?;
    let mut split = BenchmarkSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        outlier_assignment: assignment.clone(),
    };
    let mut pinned = BTreeMap::new();
    let mut inlier_cases = Vec::new();
    for case in &dataset.cases {
        match assignment.get(&case.condition_id) {
            Some(&s) => {
                pinned.insert(case.patient_id, s);
                match s {
                    SplitName::Train => split.train.push(case.case_id),
                    SplitName::Val => split.val.push(case.case_id),
                    SplitName::Test => split.test.push(case.case_id),
                }
            }
            None => inlier_cases.push(case.clone()),
        }
    }
    let inl = split_inliers_pinned(&inlier_cases, &pinned, cfg)?;
    split.train.extend(inl.train);
    split.val.extend(inl.val);
    split.test.extend(inl.test);
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok((split, inl.warnings))
}

/// Builds a split that passes [`validate_split`]. Later attempts use
/// derived seeds and a random condition order, up to `cfg.max_attempts`.
pub fn build_benchmark(dataset: &Dataset, cfg: &SplitConfig) -> Result<BenchmarkSplit> {
    dataset.validate()?;
    cfg.validate()?;
    for attempt in 0..cfg.max_attempts {
        let attempt_cfg = SplitConfig {
            seed: if attempt == 0 {
                cfg.seed
            } else {
                derive_seed(cfg.seed, &format!("attempt-{attempt}"))
            },
            ..cfg.clone()
        };
        let (split, warnings) = build_once(dataset, &attempt_cfg, attempt > 0)?;
        for w in &warnings {
            log::warn!("{w}");
        }
        let report = validate_split(dataset, &split, cfg);
        if report.passed() {
            return Ok(split);
        }
        log::debug!(
            "split attempt {attempt} failed desiderata {:?}: {:?}",
            report.failed(),
            report.desiderata.iter().map(|d| d.measured).collect::<Vec<_>>()
        );
    }
    Err(Error::SplitInfeasible {
        attempts: cfg.max_attempts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Desideratum {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    /// The quantity compared against the tolerance (or an overlap count).
    pub measured: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitValidationReport {
    pub tolerance: f64,
    pub missing_cases: usize,
    pub duplicate_cases: usize,
    pub patient_overlaps: usize,
    pub condition_overlaps: usize,
    pub outlier_samples: [usize; 3],
    pub outlier_classes: [usize; 3],
    /// Pairwise L1 distances for (train,val), (train,test), (val,test);
    /// `None` when a split has no cases to form a distribution.
    pub risk_l1: [Option<f64>; 3],
    pub skin_l1: [Option<f64>; 3],
    pub desiderata: Vec<Desideratum>,
}

impl SplitValidationReport {
    pub fn passed(&self) -> bool {
        self.missing_cases == 0 && self.duplicate_cases == 0 && self.desiderata.iter().all(|d| d.passed)
    }

    pub fn failed(&self) -> Vec<u8> {
        self.desiderata.iter().filter(|d| !d.passed).map(|d| d.id).collect()
    }
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

fn normalized<const N: usize>(counts: &[usize; N]) -> Option<[f64; N]> {
    let total: usize = counts.iter().sum();
    (total > 0).then(|| counts.map(|c| c as f64 / total as f64))
}

fn pairwise_l1<const N: usize>(hists: &[[usize; N]; 3]) -> [Option<f64>; 3] {
    PAIRS.map(|(a, b)| {
        let (pa, pb) = (normalized(&hists[a])?, normalized(&hists[b])?);
        Some(pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum())
    })
}

fn max_deviation(counts: &[usize; 3], total: usize, fractions: &[f64; 3]) -> f64 {
    counts
        .iter()
        .zip(fractions)
        .map(|(&n, f)| {
            let target = f * total as f64;
            if target > 0.0 {
                (n as f64 - target).abs() / target
            } else if n == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Audits a split against the six desiderata at `cfg.tolerance`.
pub fn validate_split(dataset: &Dataset, split: &BenchmarkSplit, cfg: &SplitConfig) -> SplitValidationReport {
    let tol = cfg.tolerance;
    let mut membership: BTreeMap<u64, SplitName> = BTreeMap::new();
    let mut duplicate_cases = 0;
    for s in SplitName::ALL {
        for &id in split.cases(s) {
            if membership.insert(id, s).is_some() {
                duplicate_cases += 1;
            }
        }
    }

    let mut missing_cases = 0;
    let mut patient_splits: BTreeMap<u64, BTreeSet<SplitName>> = BTreeMap::new();
    let mut condition_splits: BTreeMap<u32, BTreeSet<SplitName>> = BTreeMap::new();
    let mut samples = [0usize; 3];
    let mut risk = [[0usize; N_RISK]; 3];
    let mut skin = [[0usize; N_SKIN]; 3];
    for case in &dataset.cases {
        let Some(&s) = membership.get(&case.case_id) else {
            missing_cases += 1;
            continue;
        };
        patient_splits.entry(case.patient_id).or_default().insert(s);
        skin[s.index()][case.skin_type.index()] += 1;
        if let Some(cond) = dataset.table.get(case.condition_id).filter(|_| dataset.table.is_outlier(case.condition_id)) {
            condition_splits.entry(cond.id).or_default().insert(s);
            samples[s.index()] += 1;
            risk[s.index()][cond.risk.index()] += 1;
        }
    }
    let patient_overlaps = patient_splits.values().filter(|s| s.len() > 1).count();
    let condition_overlaps = condition_splits
        .iter()
        .filter(|(c, s)| s.len() > 1 || split.outlier_assignment.get(c).is_some_and(|a| !s.contains(a)))
        .count();
    let mut classes = [0usize; 3];
    for s in condition_splits.values().filter(|s| s.len() == 1) {
        classes[s.iter().next().expect("non-empty").index()] += 1;
    }
    let total_samples: usize = samples.iter().sum();
    let total_classes = condition_splits.len();
    let sample_dev = max_deviation(&samples, total_samples, &cfg.outlier_target_fractions);
    let class_dev = max_deviation(&classes, total_classes, &cfg.outlier_target_fractions);
    let risk_l1 = pairwise_l1(&risk);
    let skin_l1 = pairwise_l1(&skin);
    let worst = |v: &[Option<f64>; 3]| v.iter().map(|x| x.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let (risk_worst, skin_worst) = (worst(&risk_l1), worst(&skin_l1));

    let d = |id: u8, name: &str, passed: bool, measured: f64| Desideratum {
        id,
        name: name.to_string(),
        passed,
        measured,
    };
    let desiderata = vec![
        d(1, "patients disjoint", patient_overlaps == 0, patient_overlaps as f64),
        d(2, "outlier conditions disjoint", condition_overlaps == 0, condition_overlaps as f64),
        d(3, "outlier sample counts balanced", sample_dev <= tol, sample_dev),
        d(4, "outlier class counts balanced", class_dev <= tol, class_dev),
        d(5, "risk distributions similar", risk_worst <= tol, risk_worst),
        d(6, "skin-type distributions similar", skin_worst <= tol, skin_worst),
    ];
    SplitValidationReport {
        tolerance: tol,
        missing_cases,
        duplicate_cases,
        patient_overlaps,
        condition_overlaps,
        outlier_samples: samples,
        outlier_classes: classes,
        risk_l1,
        skin_l1,
        desiderata,
    }
}

/// On-disk split: the split itself plus the seed and config that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub config: SplitConfig,
    pub outlier_assignment: BTreeMap<u32, SplitName>,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitFile {
    pub fn new(split: &BenchmarkSplit, cfg: &SplitConfig) -> Self {
        SplitFile {
            seed: cfg.seed,
            config: cfg.clone(),
            outlier_assignment: split.outlier_assignment.clone(),
            train: split.train.clone(),
            val: split.val.clone(),
            test: split.test.clone(),
        }
    }

    pub fn split(&self) -> BenchmarkSplit {
        BenchmarkSplit {
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
            outlier_assignment: self.outlier_assignment.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Condition, ConditionStatus, SkinType};

    fn cond(id: u32, n: usize, risk: RiskLevel) -> Condition {
        Condition {
            id,
            name: format!("c{id}"),
            status: ConditionStatus::Outlier,
            risk,
            sample_count: n,
        }
    }

    fn case(case_id: u64, patient_id: u64, condition_id: u32, skin: SkinType) -> LabeledCase {
        LabeledCase {
            case_id,
            patient_id,
            condition_id,
            skin_type: skin,
            instances: vec![vec![0.0]],
        }
    }

    /// Dataset with the given outlier counts (ids 100..) and inlier counts (ids 0..).
    fn dataset(inliers: &[usize], outliers: &[usize], n_min: usize) -> Dataset {
        let mut conditions = Vec::new();
        let mut cases = Vec::new();
        let mut next = 0u64;
        for (i, &n) in inliers.iter().enumerate() {
            conditions.push(cond(i as u32, n, RiskLevel::Low));
            for _ in 0..n {
                cases.push(case(next, next, i as u32, SkinType::T3));
                next += 1;
            }
        }
        for (i, &n) in outliers.iter().enumerate() {
            let id = 100 + i as u32;
            conditions.push(cond(id, n, RiskLevel::Medium));
            for _ in 0..n {
                cases.push(case(next, next, id, SkinType::T3));
                next += 1;
            }
        }
        Dataset {
            table: ConditionTable::from_counts(n_min, conditions).unwrap(),
            cases,
        }
    }

    #[test]
    fn three_equal_conditions_get_one_split_each() {
        let ds = dataset(&[20], &[5, 5, 5], 10);
        for seed in 0..10 {
            let cfg = SplitConfig { seed, ..SplitConfig::default() };
            let a = assign_outlier_conditions(&ds.table, &ds.cases, &cfg).unwrap();
            let used: BTreeSet<SplitName> = a.values().copied().collect();
            assert_eq!(used.len(), 3);
        }
    }

    #[test]
    fn too_few_outliers() {
        let ds = dataset(&[20], &[5, 5], 10);
        assert!(matches!(
            assign_outlier_conditions(&ds.table, &ds.cases, &SplitConfig::default()),
            Err(Error::InsufficientOutliers { found: 2 })
        ));
    }

    #[test]
    fn greedy_matches_exhaustive_optimum_on_six_conditions() {
        let ds = dataset(&[20], &[5, 5, 4, 4, 3, 3], 10);
        let cfg = SplitConfig::default();
        let stats = outlier_condition_stats(&ds.table, &ds.cases).unwrap();
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(6) {
            let assignment: Vec<SplitName> = (0..6).map(|i| SplitName::ALL[(code / 3usize.pow(i)) % 3]).collect();
            best = best.min(assignment_objective(&stats, &assignment, &cfg));
        }
        for seed in 0..5 {
            let cfg = SplitConfig { seed, ..cfg.clone() };
            let a = assign_outlier_conditions(&ds.table, &ds.cases, &cfg).unwrap();
            let assignment: Vec<SplitName> = stats.iter().map(|s| a[&s.id]).collect();
            assert!((assignment_objective(&stats, &assignment, &cfg) - best).abs() < 1e-12);
            let mut totals = [0usize; 3];
            for s in &stats {
                totals[a[&s.id].index()] += s.samples;
            }
            assert!(totals.iter().all(|t| (7..=9).contains(t)), "{totals:?}");
        }
    }

    #[test]
    fn inlier_ratio_is_exact_for_ten_patients() {
        let cases: Vec<LabeledCase> = (0..10).map(|i| case(i, i, 0, SkinType::T3)).collect();
        let s = split_inliers(&cases, &SplitConfig::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn patient_cases_stay_together() {
        let mut cases: Vec<LabeledCase> = (0..20).map(|i| case(i, i, (i % 2) as u32, SkinType::T3)).collect();
        cases.push(case(100, 3, 0, SkinType::T3));
        cases.push(case(101, 3, 1, SkinType::T3));
        let s = split_inliers(&cases, &SplitConfig::default()).unwrap();
        let side = |id: u64| SplitName::ALL.into_iter().find(|n| match n {
            SplitName::Train => s.train.contains(&id),
            SplitName::Val => s.val.contains(&id),
            SplitName::Test => s.test.contains(&id),
        });
        assert_eq!(side(3), side(100));
        assert_eq!(side(3), side(101));
    }

    #[test]
    fn sparse_condition_goes_to_train_with_warning() {
        let cases = vec![case(0, 0, 5, SkinType::T3), case(1, 1, 5, SkinType::T3)];
        let s = split_inliers(&cases, &SplitConfig::default()).unwrap();
        assert_eq!(s.train, vec![0, 1]);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn validation_flags_patient_overlap_and_empty_test() {
        let ds = dataset(&[10], &[3, 3, 3], 10);
        let cfg = SplitConfig::default();
        let mut split = build_once(&ds, &cfg, false).unwrap().0;
        assert_eq!(validate_split(&ds, &split, &cfg).failed(), Vec::<u8>::new());

        let mut overlapping = ds.clone();
        let val_case = split.val[0];
        let train_case = split.train[0];
        let p = overlapping.cases.iter().find(|c| c.case_id == train_case).unwrap().patient_id;
        overlapping.cases.iter_mut().find(|c| c.case_id == val_case).unwrap().patient_id = p;
        let report = validate_split(&overlapping, &split, &cfg);
        assert!(!report.desiderata[0].passed);
        assert_eq!(report.desiderata.len(), 6);

        split.train.append(&mut split.test);
        let report = validate_split(&ds, &split, &cfg);
        let failed = report.failed();
        assert!(failed.contains(&3) && failed.contains(&4), "{failed:?}");
    }

    #[test]
    fn reported_split_shape_is_admissible() {
        // 68/66/65 outlier classes holding 1111/1082/937 samples
        let spread = |classes: usize, samples: usize| -> Vec<usize> {
            (0..classes).map(|i| samples / classes + usize::from(i < samples % classes)).collect()
        };
        let mut outliers = spread(68, 1111);
        outliers.extend(spread(66, 1082));
        outliers.extend(spread(65, 937));
        let ds = dataset(&[200], &outliers, 100);
        let mut assignment = BTreeMap::new();
        let mut split = BenchmarkSplit {
            train: vec![],
            val: vec![],
            test: vec![],
            outlier_assignment: BTreeMap::new(),
        };
        for (i, _) in outliers.iter().enumerate() {
            let s = if i < 68 { SplitName::Train } else if i < 134 { SplitName::Val } else { SplitName::Test };
            assignment.insert(100 + i as u32, s);
        }
        for c in &ds.cases {
            let s = assignment.get(&c.condition_id).copied().unwrap_or(SplitName::Train);
            match s {
                SplitName::Train => split.train.push(c.case_id),
                SplitName::Val => split.val.push(c.case_id),
                SplitName::Test => split.test.push(c.case_id),
            }
        }
        split.outlier_assignment = assignment;
        let report = validate_split(&ds, &split, &SplitConfig::default());
        assert_eq!(report.outlier_classes, [68, 66, 65]);
        assert_eq!(report.outlier_samples, [1111, 1082, 937]);
        for d in &report.desiderata[1..4] {
            assert!(d.passed, "{d:?}");
        }
    }
}
