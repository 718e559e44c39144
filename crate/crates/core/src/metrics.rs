//! Binary classification metrics, percentile bootstrap intervals and the
//! label-permutation baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledCohort, PredictionSet};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Precision,
    Recall,
    F1,
    Auprc,
    BalancedAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Auc,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Auprc,
        Metric::BalancedAccuracy,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::Auprc => "auprc",
            Metric::BalancedAccuracy => "balanced_accuracy",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::Auc => "AUC",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::F1 => "F1-score",
            Metric::Auprc => "AUPRC",
            Metric::BalancedAccuracy => "Balanced Accuracy",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::argument(format!("unknown metric '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Predicted positive iff `score >= threshold`.
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = ConfusionCounts::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Zero when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio_or_zero(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Result<f64> {
        if self.tp + self.fn_ == 0 {
            return Err(Error::UndefinedMetric("recall needs at least one positive".into()));
        }
        Ok(self.tp as f64 / (self.tp + self.fn_) as f64)
    }

    /// Harmonic mean of precision and recall; zero when both are zero.
    pub fn f1(&self) -> Result<f64> {
        let p = self.precision();
        let r = self.recall()?;
        Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
    }
}

fn ratio_or_zero(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_at_threshold(
    preds: &PredictionSet,
    labels: &LabeledCohort,
    threshold: f64,
) -> Result<ConfusionCounts> {
    let y = labels.labels_for(preds)?;
    Ok(ConfusionCounts::from_scores(preds.scores(), &y, threshold))
}

pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
        return Err(Error::UndefinedMetric("balanced accuracy needs both classes".into()));
    }
    let tpr = c.tp as f64 / (c.tp + c.fn_) as f64;
    let tnr = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok((tpr + tnr) / 2.0)
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|y| **y).count();
    (pos, labels.len() - pos)
}

fn require_both_classes(labels: &[bool], what: &str) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("{what} needs both classes")));
    }
    Ok((pos, neg))
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Alignment(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// ROC AUC via the Mann-Whitney rank sum, ties sharing their average rank.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = require_both_classes(labels, "AUC")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: mean over positives of the precision at their rank
/// in descending score order. Equal scores keep their input order.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = require_both_classes(labels, "AUPRC")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        if labels[idx] {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

pub fn evaluate(metric: Metric, scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let conf = || ConfusionCounts::from_scores(scores, labels, threshold);
    match metric {
        Metric::Auc => roc_auc(scores, labels),
        Metric::Auprc => auprc(scores, labels),
        Metric::Precision => {
            require_both_classes(labels, "precision")?;
            Ok(conf().precision())
        }
        Metric::Recall => conf().recall(),
        Metric::F1 => conf().f1(),
        Metric::BalancedAccuracy => balanced_accuracy(&conf()),
    }
}

/// All six metrics in `Metric::ALL` order.
pub fn evaluate_all(scores: &[f64], labels: &[bool], threshold: f64) -> Result<[f64; 6]> {
    check_lengths(scores, labels)?;
    require_both_classes(labels, "evaluation")?;
    let c = ConfusionCounts::from_scores(scores, labels, threshold);
    Ok([
        roc_auc(scores, labels)?,
        c.precision(),
        c.recall()?,
        c.f1()?,
        auprc(scores, labels)?,
        balanced_accuracy(&c)?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    /// Mean over resamples.
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_resamples: usize,
    /// Metric on the full, unresampled evaluation set.
    pub full_sample: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: IntervalEstimate,
    pub precision: IntervalEstimate,
    pub recall: IntervalEstimate,
    pub f1: IntervalEstimate,
    pub auprc: IntervalEstimate,
    pub balanced_accuracy: IntervalEstimate,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> &IntervalEstimate {
        match m {
            Metric::Auc => &self.auc,
            Metric::Precision => &self.precision,
            Metric::Recall => &self.recall,
            Metric::F1 => &self.f1,
            Metric::Auprc => &self.auprc,
            Metric::BalancedAccuracy => &self.balanced_accuracy,
        }
    }

    fn from_estimates(e: [IntervalEstimate; 6]) -> Self {
        MetricReport {
            auc: e[0],
            precision: e[1],
            recall: e[2],
            f1: e[3],
            auprc: e[4],
            balanced_accuracy: e[5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Redraws allowed per resample when a draw contains a single class.
    pub max_retries: usize,
    pub parallel: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: DEFAULT_RESAMPLES,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            max_retries: 100,
            parallel: true,
        }
    }
}

/// Row indices of resample `index`, drawn with replacement from a stream
/// derived from `(seed, index)`. Single-class draws are redrawn from the
/// same stream.
pub fn resample_indices(labels: &[bool], seed: u64, index: usize, max_retries: usize) -> Result<Vec<usize>> {
    let n = labels.len();
    let mut rng = Rng::derived(seed, index as u64);
    for _ in 0..=max_retries {
        let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
        let pos = idx.iter().filter(|&&i| labels[i]).count();
        if pos > 0 && pos < n {
            return Ok(idx);
        }
    }
    Err(Error::Degenerate(format!(
        "resample {index} stayed single-class after {max_retries} retries"
    )))
}

/// Linear-interpolation percentile of sorted values, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean computed as offsets from the first value, exact for constant input.
pub(crate) fn stable_mean(values: &[f64]) -> f64 {
    let base = values[0];
    base + values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64
}

fn summarize(mut values: Vec<f64>, full_sample: f64) -> IntervalEstimate {
    let point = stable_mean(&values);
    values.sort_by(f64::total_cmp);
    IntervalEstimate {
        point,
        lo: percentile(&values, 0.025),
        hi: percentile(&values, 0.975),
        n_resamples: values.len(),
        full_sample,
    }
}

fn run_resamples<T: Send>(
    cfg: &BootstrapConfig,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if cfg.parallel {
        (0..cfg.n_resamples).into_par_iter().map(f).collect()
    } else {
        (0..cfg.n_resamples).map(f).collect()
    }
}

fn gather(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

fn gather_labels(labels: &[bool], idx: &[usize]) -> Vec<bool> {
    idx.iter().map(|&i| labels[i]).collect()
}

pub fn bootstrap_ci(
    metric: Metric,
    scores: &[f64],
    labels: &[bool],
    cfg: &BootstrapConfig,
) -> Result<IntervalEstimate> {
    if cfg.n_resamples == 0 {
        return Err(Error::argument("n_resamples must be at least 1"));
    }
    let full = evaluate(metric, scores, labels, cfg.threshold)?;
    let values = run_resamples(cfg, |i| {
        let idx = resample_indices(labels, cfg.seed, i, cfg.max_retries)?;
        evaluate(metric, &gather(scores, &idx), &gather_labels(labels, &idx), cfg.threshold)
    })?;
    Ok(summarize(values, full))
}

/// All six metrics from one shared set of resamples.
pub fn bootstrap_report(scores: &[f64], labels: &[bool], cfg: &BootstrapConfig) -> Result<MetricReport> {
    if cfg.n_resamples == 0 {
        return Err(Error::argument("n_resamples must be at least 1"));
    }
    let full = evaluate_all(scores, labels, cfg.threshold)?;
    let per_resample = run_resamples(cfg, |i| {
        let idx = resample_indices(labels, cfg.seed, i, cfg.max_retries)?;
        evaluate_all(&gather(scores, &idx), &gather_labels(labels, &idx), cfg.threshold)
    })?;
    let estimates: Vec<IntervalEstimate> = (0..6)
        .map(|m| summarize(per_resample.iter().map(|v| v[m]).collect(), full[m]))
        .collect();
    Ok(MetricReport::from_estimates(
        estimates.try_into().expect("six metrics"),
    ))
}

pub fn evaluate_predictions(
    preds: &PredictionSet,
    cohort: &LabeledCohort,
    cfg: &BootstrapConfig,
) -> Result<MetricReport> {
    let labels = cohort.labels_for(preds)?;
    bootstrap_report(preds.scores(), &labels, cfg)
}

/// A trainable scoring procedure over fixed train and test splits.
pub trait TrainingProcedure {
    fn train_labels(&self) -> &[bool];
    fn test_labels(&self) -> &[bool];
    /// Train with `train_labels` in place of the true training labels and
    /// score the test split.
    fn fit_score(&self, train_labels: &[bool]) -> Result<Vec<f64>>;
}

/// Retrain on permuted training labels and evaluate on the untouched test
/// split. With `permute == false` the procedure runs on the true labels.
pub fn permutation_baseline(
    procedure: &dyn TrainingProcedure,
    seed: u64,
    permute: bool,
    boot: &BootstrapConfig,
) -> Result<MetricReport> {
    let mut labels = procedure.train_labels().to_vec();
    if permute {
        Rng::new(seed).shuffle(&mut labels);
    }
    let scores = procedure.fit_score(&labels)?;
    bootstrap_report(&scores, procedure.test_labels(), boot)
}
