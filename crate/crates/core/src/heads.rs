//! Linear softmax heads over case features, the loss menu (plain
//! cross-entropy, outlier exposure, reject bucket, fine-only and the
//! hierarchical fine + coarse loss), analytic gradients, a central
//! finite-difference oracle and the SGD trainer.
//!
//! Output indices are laid out as the inlier block followed by the outlier
//! block. The outlier block is empty for `ce_inlier_only` and `oe`, a single
//! reject class for `reject_bucket`, and one abstention class per training
//! outlier condition for `fine_only` and `hod`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::ProbabilityVector;
use crate::error::{Error, Result};
use crate::metrics;
use crate::scoring::{self, Scorer};

/// Standard deviation of the initial weights.
pub const INIT_SCALE: f64 = 0.01;

/// Coarse-loss weight used throughout the HOD experiments.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Outlier exposure weight.
pub const DEFAULT_LAMBDA_OE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CeInlierOnly,
    Oe,
    RejectBucket,
    FineOnly,
    Hod,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CeInlierOnly => "ce_inlier_only",
            LossKind::Oe => "oe",
            LossKind::RejectBucket => "reject_bucket",
            LossKind::FineOnly => "fine_only",
            LossKind::Hod => "hod",
        }
    }

    /// Whether the head carries an outlier block whose mass is the OOD score.
    pub fn has_outlier_block(self) -> bool {
        matches!(self, LossKind::RejectBucket | LossKind::FineOnly | LossKind::Hod)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutlierBlock {
    None,
    /// One abstention class absorbing every listed outlier condition.
    Reject { members: Vec<u32> },
    /// One abstention class per training outlier condition.
    Fine { classes: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLayout {
    pub inliers: Vec<u32>,
    pub outliers: OutlierBlock,
}

impl ClassLayout {
    pub fn inlier_only(inliers: Vec<u32>) -> Self {
        ClassLayout {
            inliers,
            outliers: OutlierBlock::None,
        }
    }

    pub fn reject(inliers: Vec<u32>, members: Vec<u32>) -> Self {
        ClassLayout {
            inliers,
            outliers: OutlierBlock::Reject { members },
        }
    }

    pub fn fine(inliers: Vec<u32>, outliers: Vec<u32>) -> Self {
        ClassLayout {
            inliers,
            outliers: OutlierBlock::Fine { classes: outliers },
        }
    }

    pub fn num_inliers(&self) -> usize {
        self.inliers.len()
    }

    pub fn outlier_block_len(&self) -> usize {
        match &self.outliers {
            OutlierBlock::None => 0,
            OutlierBlock::Reject { .. } => 1,
            OutlierBlock::Fine { classes } => classes.len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_inliers() + self.outlier_block_len()
    }

    pub fn inlier_index(&self, label: u32) -> Option<usize> {
        self.inliers.iter().position(|&c| c == label)
    }

    /// Output index of `label`, if the layout has one for it.
    pub fn index_of(&self, label: u32) -> Option<usize> {
        if let Some(i) = self.inlier_index(label) {
            return Some(i);
        }
        let n = self.num_inliers();
        match &self.outliers {
            OutlierBlock::None => None,
            OutlierBlock::Reject { members } => members.contains(&label).then_some(n),
            OutlierBlock::Fine { classes } => classes.iter().position(|&c| c == label).map(|i| n + i),
        }
    }

    fn check(&self, kind: LossKind) -> Result<()> {
        if self.inliers.is_empty() {
            return Err(Error::Config("class layout has no inlier classes".into()));
        }
        let ok = match (kind, &self.outliers) {
            (LossKind::CeInlierOnly | LossKind::Oe, OutlierBlock::None) => true,
            (LossKind::RejectBucket, OutlierBlock::Reject { .. }) => true,
            (LossKind::FineOnly | LossKind::Hod, OutlierBlock::Fine { classes }) => !classes.is_empty(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss {kind} is incompatible with outlier block {:?}",
                self.outliers
            )))
        }
    }
}

/// What a training sample asks the head to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// Outlier exposure: uniform distribution over the inlier classes.
    Uniform,
}

/// A labelled case-level feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub case_id: u64,
    pub feature: Vec<f64>,
    pub label: u32,
    pub is_outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub class_layout: ClassLayout,
    pub loss_kind: LossKind,
    pub lambda: f64,
    pub lambda_oe: f64,
    pub view_id: u32,
    pub init_seed: u64,
    pub dim: usize,
    /// Row-major `num_classes x dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(
        class_layout: ClassLayout,
        loss_kind: LossKind,
        dim: usize,
        view_id: u32,
        init_seed: u64,
    ) -> Result<Self> {
        class_layout.check(loss_kind)?;
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let k = class_layout.num_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let normal = Normal::new(0.0, INIT_SCALE).expect("valid normal");
        let weights = (0..k * dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(ClassifierHead {
            class_layout,
            loss_kind,
            lambda: DEFAULT_LAMBDA,
            lambda_oe: DEFAULT_LAMBDA_OE,
            view_id,
            init_seed,
            dim,
            weights,
            biases: vec![0.0; k],
        })
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_lambda_oe(mut self, lambda_oe: f64) -> Self {
        self.lambda_oe = lambda_oe;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.biases.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// Coarse-loss weight actually applied by the configured loss.
    pub fn coarse_weight(&self) -> f64 {
        match self.loss_kind {
            LossKind::Hod => self.lambda,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.class_layout.check(self.loss_kind)?;
        let k = self.class_layout.num_classes();
        if self.biases.len() != k || self.weights.len() != k * self.dim {
            return Err(Error::InvalidInput(format!(
                "head parameters do not match a {k} x {} layout",
                self.dim
            )));
        }
        if !(self.lambda >= 0.0) || !(self.lambda_oe >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "feature has dimension {}, head expects {}",
                feature.len(),
                self.dim
            )));
        }
        if feature.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite feature".into()));
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.biases)
            .map(|(row, b)| dot(row, feature) + b)
            .collect())
    }

    /// Softmax over all output classes.
    pub fn forward(&self, feature: &[f64]) -> Result<Forward> {
        let logits = self.logits(feature)?;
        let probs = ProbabilityVector(softmax(&logits)?);
        Ok(Forward { logits, probs })
    }

    /// Maps a condition label onto what the configured loss trains towards.
    /// `Ok(None)` means the sample does not take part in training.
    pub fn target(&self, label: u32, is_outlier: bool) -> Result<Option<Target>> {
        let layout = &self.class_layout;
        if let Some(i) = layout.inlier_index(label) {
            return Ok(Some(Target::Class(i)));
        }
        match self.loss_kind {
            LossKind::CeInlierOnly if is_outlier => Ok(None),
            LossKind::Oe if is_outlier => Ok(Some(Target::Uniform)),
            _ => layout
                .index_of(label)
                .map(|i| Some(Target::Class(i)))
                .ok_or(Error::UnknownLabel(label)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub probs: ProbabilityVector,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logits)?;
    Ok(logits.iter().map(|z| (z - lse).exp()).collect())
}

fn log_sum_exp(z: &[f64]) -> Result<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(format!("logit overflow (max = {max})")));
    }
    Ok(max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("loss weight must be non-negative, got {lambda}")))
    }
}

fn check_len(layout: &ClassLayout, probs: &ProbabilityVector) -> Result<()> {
    if probs.len() == layout.num_classes() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "probability vector has {} entries, layout has {}",
            probs.len(),
            layout.num_classes()
        )))
    }
}

/// Cross-entropy on one output index.
pub fn cross_entropy(probs: &ProbabilityVector, index: usize) -> Result<f64> {
    probs
        .values()
        .get(index)
        .map(|p| -p.ln())
        .ok_or_else(|| Error::InvalidInput(format!("index {index} out of range")))
}

/// Fine cross-entropy plus `lambda` times the coarse inlier/outlier
/// cross-entropy, where group probabilities are block sums.
pub fn hod_loss(layout: &ClassLayout, probs: &ProbabilityVector, label: u32, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    check_len(layout, probs)?;
    let index = layout.index_of(label).ok_or(Error::UnknownLabel(label))?;
    let n_in = layout.num_inliers();
    let p = probs.values();
    let group: f64 = if index < n_in {
        p[..n_in].iter().sum()
    } else {
        p[n_in..].iter().sum()
    };
    Ok(-p[index].ln() - lambda * group.ln())
}

/// Cross-entropy where every outlier label collapses onto the reject class.
pub fn reject_bucket_loss(layout: &ClassLayout, probs: &ProbabilityVector, label: u32) -> Result<f64> {
    check_len(layout, probs)?;
    if !matches!(layout.outliers, OutlierBlock::Reject { .. }) {
        return Err(Error::Config("reject bucket loss needs a reject layout".into()));
    }
    let index = layout.index_of(label).ok_or(Error::UnknownLabel(label))?;
    cross_entropy(probs, index)
}

/// Outlier exposure: cross-entropy for inliers, `lambda_oe` times the
/// cross-entropy from the uniform target for outliers.
pub fn oe_loss(
    layout: &ClassLayout,
    probs: &ProbabilityVector,
    label: u32,
    is_outlier: bool,
    lambda_oe: f64,
) -> Result<f64> {
    check_lambda(lambda_oe)?;
    check_len(layout, probs)?;
    if layout.outlier_block_len() != 0 {
        return Err(Error::Config("outlier exposure needs an inlier-only layout".into()));
    }
    if is_outlier {
        let k = probs.len() as f64;
        let ce = -probs.values().iter().map(|p| p.ln()).sum::<f64>() / k;
        Ok(lambda_oe * ce)
    } else {
        let index = layout.inlier_index(label).ok_or(Error::UnknownLabel(label))?;
        cross_entropy(probs, index)
    }
}

/// Loss of the head's configured objective, computed from probabilities.
pub fn head_loss(head: &ClassifierHead, feature: &[f64], label: u32, is_outlier: bool) -> Result<f64> {
    let probs = head.forward(feature)?.probs;
    let layout = &head.class_layout;
    match head.loss_kind {
        LossKind::CeInlierOnly => {
            let i = layout.inlier_index(label).ok_or(Error::UnknownLabel(label))?;
            cross_entropy(&probs, i)
        }
        LossKind::Oe => oe_loss(layout, &probs, label, is_outlier, head.lambda_oe),
        LossKind::RejectBucket => reject_bucket_loss(layout, &probs, label),
        LossKind::FineOnly => hod_loss(layout, &probs, label, 0.0),
        LossKind::Hod => hod_loss(layout, &probs, label, head.lambda),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl HeadGradient {
    fn zeros(head: &ClassifierHead) -> Self {
        HeadGradient {
            weights: vec![0.0; head.weights.len()],
            biases: vec![0.0; head.biases.len()],
        }
    }

    /// All partial derivatives, weights first.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.biases).copied().collect()
    }
}

/// Loss and its gradient with respect to the logits, from log-probabilities.
fn logit_loss_grad(head: &ClassifierHead, logits: &[f64], target: Target) -> Result<(f64, Vec<f64>)> {
    let lse = log_sum_exp(logits)?;
    let log_p: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let n_in = head.class_layout.num_inliers();
    match target {
        Target::Uniform => {
            let k = p.len() as f64;
            let loss = -head.lambda_oe * log_p.iter().sum::<f64>() / k;
            let grad = p.iter().map(|pi| head.lambda_oe * (pi - 1.0 / k)).collect();
            Ok((loss, grad))
        }
        Target::Class(y) => {
            let mut grad = p.clone();
            grad[y] -= 1.0;
            let mut loss = -log_p[y];
            let lambda = head.coarse_weight();
            if lambda > 0.0 {
                let group = if y < n_in { 0..n_in } else { n_in..p.len() };
                let log_group = log_sum_exp(&logits[group.clone()])? - lse;
                let p_group = log_group.exp();
                loss -= lambda * log_group;
                // d(-log P_G)/dz_k = p_k - 1[k in G] p_k / P_G
                for (k, g) in grad.iter_mut().enumerate() {
                    let q = if group.contains(&k) { p[k] / p_group } else { 0.0 };
                    *g += lambda * (p[k] - q);
                }
            }
            Ok((loss, grad))
        }
    }
}

/// Gradient of the configured loss with respect to the logits.
pub fn logit_gradient(head: &ClassifierHead, feature: &[f64], label: u32, is_outlier: bool) -> Result<Vec<f64>> {
    let target = head
        .target(label, is_outlier)?
        .ok_or(Error::UnknownLabel(label))?;
    let logits = head.logits(feature)?;
    Ok(logit_loss_grad(head, &logits, target)?.1)
}

/// Analytic gradient of the configured loss; returns the loss alongside.
pub fn loss_gradient(
    head: &ClassifierHead,
    feature: &[f64],
    label: u32,
    is_outlier: bool,
) -> Result<(f64, HeadGradient)> {
    let target = head
        .target(label, is_outlier)?
        .ok_or(Error::UnknownLabel(label))?;
    let mut grad = HeadGradient::zeros(head);
    let loss = accumulate_gradient(head, feature, target, 1.0, &mut grad)?;
    Ok((loss, grad))
}

fn accumulate_gradient(
    head: &ClassifierHead,
    feature: &[f64],
    target: Target,
    scale: f64,
    grad: &mut HeadGradient,
) -> Result<f64> {
    let logits = head.logits(feature)?;
    let (loss, dz) = logit_loss_grad(head, &logits, target)?;
    if !loss.is_finite() || dz.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite loss gradient".into()));
    }
    for (k, g) in dz.iter().enumerate() {
        let g = g * scale;
        grad.biases[k] += g;
        for (w, x) in grad.weights[k * head.dim..(k + 1) * head.dim].iter_mut().zip(feature) {
            *w += g * x;
        }
    }
    Ok(loss)
}

/// Central differences of `f` around `params`.
pub fn central_differences(params: &[f64], epsilon: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut x = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + epsilon;
            let plus = f(&x);
            x[i] = orig - epsilon;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * epsilon)
        })
        .collect()
}

/// Finite-difference gradient of [`head_loss`] over every weight and bias.
pub fn finite_diff_grad(
    head: &ClassifierHead,
    feature: &[f64],
    label: u32,
    is_outlier: bool,
    epsilon: f64,
) -> Result<HeadGradient> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    head_loss(head, feature, label, is_outlier)?;
    let nw = head.weights.len();
    let params: Vec<f64> = head.weights.iter().chain(&head.biases).copied().collect();
    let mut probe = head.clone();
    let flat = central_differences(&params, epsilon, |p| {
        probe.weights.copy_from_slice(&p[..nw]);
        probe.biases.copy_from_slice(&p[nw..]);
        head_loss(&probe, feature, label, is_outlier).unwrap_or(f64::NAN)
    });
    Ok(HeadGradient {
        weights: flat[..nw].to_vec(),
        biases: flat[nw..].to_vec(),
    })
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Learning rate multiplier reached at the final step.
    pub decay_factor: f64,
    pub momentum: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            initial_lr: 0.1,
            decay_factor: 0.1,
            momentum: 0.9,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("steps, batch_size and eval_every must be positive".into()));
        }
        if !(self.initial_lr >= 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config("learning rate must be >= 0 and momentum in [0,1)".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0,1]".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        self.initial_lr * self.decay_factor.powf(step as f64 / self.steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Mean mini-batch loss at every step.
    pub step_losses: Vec<f64>,
    /// `(step, validation AUROC)` at every checkpoint, starting with step 0.
    pub val_auroc: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val_auroc: Option<f64>,
}

/// Mean configured loss over the samples that take part in training.
pub fn dataset_loss(head: &ClassifierHead, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        if let Some(target) = head.target(s.label, s.is_outlier)? {
            let logits = head.logits(&s.feature)?;
            total += logit_loss_grad(head, &logits, target)?.0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("no trainable samples".into()));
    }
    Ok(total / n as f64)
}

fn validation_auroc(head: &ClassifierHead, val: &[Sample]) -> Result<Option<f64>> {
    let scorer = Scorer::default_for(head.loss_kind);
    let mut inliers = Vec::new();
    let mut outliers = Vec::new();
    for s in val {
        let u = scoring::ood_score(scorer, head, &s.feature)?;
        if s.is_outlier {
            outliers.push(u);
        } else {
            inliers.push(u);
        }
    }
    if inliers.is_empty() || outliers.is_empty() {
        return Ok(None);
    }
    metrics::auroc(&inliers, &outliers).map(Some)
}

/// Mini-batch SGD with momentum and exponentially decaying learning rate.
/// Validation OOD AUROC is evaluated at step 0 and every `eval_every`
/// steps; the checkpoint with the highest value (earliest on ties) is
/// returned. Without a two-sided validation set the final weights are kept.
pub fn train_head(
    head: &ClassifierHead,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ClassifierHead, TrainingTrace)> {
    cfg.validate()?;
    head.validate()?;
    let mut batchable = Vec::with_capacity(train.len());
    for s in train {
        if let Some(t) = head.target(s.label, s.is_outlier)? {
            batchable.push((s.feature.as_slice(), t));
        }
    }
    if batchable.is_empty() {
        return Err(Error::InvalidInput("no trainable samples".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..batchable.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut current = head.clone();
    let mut velocity = HeadGradient::zeros(head);
    let mut grad = HeadGradient::zeros(head);
    let mut trace = TrainingTrace::default();

    let mut best = head.clone();
    let mut best_auroc = validation_auroc(head, val)?;
    if let Some(a) = best_auroc {
        trace.val_auroc.push((0, a));
    }

    for step in 0..cfg.steps {
        grad.weights.iter_mut().for_each(|g| *g = 0.0);
        grad.biases.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / cfg.batch_size as f64;
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (feature, target) = batchable[order[cursor]];
            cursor += 1;
            batch_loss += accumulate_gradient(&current, feature, target, scale, &mut grad)? * scale;
        }
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { step, loss: batch_loss });
        }
        trace.step_losses.push(batch_loss);

        let lr = cfg.learning_rate(step);
        for ((w, v), g) in current
            .weights
            .iter_mut()
            .chain(current.biases.iter_mut())
            .zip(velocity.weights.iter_mut().chain(velocity.biases.iter_mut()))
            .zip(grad.weights.iter().chain(&grad.biases))
        {
            *v = cfg.momentum * *v + g;
            *w -= lr * *v;
        }
        if current.weights.iter().chain(&current.biases).any(|w| !w.is_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            if let Some(a) = validation_auroc(&current, val)? {
                trace.val_auroc.push((done, a));
                if best_auroc.is_none_or(|b| a > b) {
                    best_auroc = Some(a);
                    best = current.clone();
                    trace.best_step = done;
                }
            }
        }
    }

    if best_auroc.is_none() {
        best = current;
        trace.best_step = cfg.steps;
    }
    trace.best_val_auroc = best_auroc;
    Ok((best, trace))
}

/// On-disk checkpoint of a trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheckpoint {
    pub class_layout: ClassLayout,
    pub loss_kind: LossKind,
    pub lambda: f64,
    pub lambda_oe: f64,
    pub view_id: u32,
    pub init_seed: u64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub val_auroc: Option<f64>,
}

impl HeadCheckpoint {
    pub fn from_head(head: &ClassifierHead, val_auroc: Option<f64>) -> Self {
        HeadCheckpoint {
            class_layout: head.class_layout.clone(),
            loss_kind: head.loss_kind,
            lambda: head.lambda,
            lambda_oe: head.lambda_oe,
            view_id: head.view_id,
            init_seed: head.init_seed,
            weights: head.weights.chunks_exact(head.dim).map(<[f64]>::to_vec).collect(),
            biases: head.biases.clone(),
            val_auroc,
        }
    }

    pub fn into_head(self) -> Result<ClassifierHead> {
        let dim = self.weights.first().map_or(0, Vec::len);
        if self.weights.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput("ragged weight matrix".into()));
        }
        let head = ClassifierHead {
            class_layout: self.class_layout,
            loss_kind: self.loss_kind,
            lambda: self.lambda,
            lambda_oe: self.lambda_oe,
            view_id: self.view_id,
            init_seed: self.init_seed,
            dim,
            weights: self.weights.into_iter().flatten().collect(),
            biases: self.biases,
        };
        head.validate()?;
        Ok(head)
    }
}
