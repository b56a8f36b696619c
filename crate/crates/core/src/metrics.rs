//! Evaluation metrics over scored samples.
//!
//! A sample is *flagged* (predicted to hallucinate) when `score >= tau`.
//! Precision, recall and F1 with a zero denominator are reported as 0.
//! AUROC is the Mann-Whitney statistic with ties counted as one half; it is
//! computed from sorted scores in exact integer arithmetic so the result is
//! bit-identical to pairwise counting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty scored set")]
    Empty,
    #[error("undefined AUROC: labels contain only {0}")]
    UndefinedAuroc(&'static str),
    #[error("sample {index}: score {score} is not a finite value in [0, 1]")]
    InvalidScore { index: usize, score: f64 },
    #[error("sample {index}: missing metadata field {key:?}")]
    MissingGroupKey { index: usize, key: String },
    #[error("no thresholds given")]
    NoThresholds,
    #[error("invalid rating matrix: {0}")]
    InvalidRatings(String),
    #[error("kappa undefined: expected agreement is 1 but observed agreement is {0}")]
    UndefinedKappa(f64),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub score: f64,
    pub label: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, String>,
}

impl ScoredSample {
    pub fn new(sample_id: impl Into<String>, score: f64, label: bool) -> Self {
        Self {
            sample_id: sample_id.into(),
            score,
            label,
            attrs: BTreeMap::new(),
        }
    }
}

/// Probe scores paired with ground-truth labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    samples: Vec<ScoredSample>,
}

impl ScoredSet {
    /// Validates that every score is finite and inside `[0, 1]`.
    pub fn new(samples: Vec<ScoredSample>) -> Result<Self> {
        for (index, s) in samples.iter().enumerate() {
            if !(s.score.is_finite() && (0.0..=1.0).contains(&s.score)) {
                return Err(MetricError::InvalidScore { index, score: s.score });
            }
        }
        Ok(Self { samples })
    }

    /// Convenience constructor with generated ids `s0, s1, ...`.
    pub fn from_pairs(scores: &[f64], labels: &[bool]) -> Result<Self> {
        assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
        Self::new(
            scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&s, &l))| ScoredSample::new(format!("s{i}"), s, l))
                .collect(),
        )
    }

    pub fn samples(&self) -> &[ScoredSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label).count()
    }

    pub fn base_rate(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.len() as f64
        }
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.score)
    }

    pub fn with_flipped_labels(&self) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| ScoredSample {
                    label: !s.label,
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Area under the ROC curve.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (twice_u, pos, neg) = mann_whitney_twice_u(set)?;
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Returns `(2U, n_pos, n_neg)` where U counts (positive, negative) pairs with
/// the positive scored higher, ties counting one half.
fn mann_whitney_twice_u(set: &ScoredSet) -> Result<(u64, u64, u64)> {
    let pos = set.positives() as u64;
    let neg = set.len() as u64 - pos;
    if set.is_empty() {
        return Err(MetricError::Empty);
    }
    if pos == 0 {
        return Err(MetricError::UndefinedAuroc("negatives"));
    }
    if neg == 0 {
        return Err(MetricError::UndefinedAuroc("positives"));
    }
    let mut sorted: Vec<(f64, bool)> = set.samples.iter().map(|s| (s.score, s.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut twice_u = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok((twice_u, pos, neg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub tau: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of samples not flagged.
    pub coverage: f64,
}

impl ThresholdRow {
    pub fn from_counts(tau: f64, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let total = tp + fp + fn_ + tn;
        Self {
            tau,
            tp,
            fp,
            fn_,
            tn,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            coverage: ratio(fn_ + tn, total),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `num / den`, or 0 when `den` is 0.
pub(crate) fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts how many positives and negatives score `>= tau`, given both
/// score lists sorted ascending.
pub(crate) fn flagged_counts(sorted_pos: &[f64], sorted_neg: &[f64], tau: f64) -> (usize, usize) {
    let above = |v: &[f64]| v.len() - v.partition_point(|&s| s < tau);
    (above(sorted_pos), above(sorted_neg))
}

pub(crate) fn split_sorted(set: &ScoredSet) -> (Vec<f64>, Vec<f64>) {
    let (mut pos, mut neg): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    for s in set.samples() {
        if s.label {
            pos.push(s.score);
        } else {
            neg.push(s.score);
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    (pos, neg)
}

/// One row per threshold, in the order given.
pub fn threshold_sweep(set: &ScoredSet, taus: &[f64]) -> Result<Vec<ThresholdRow>> {
    if set.is_empty() {
        return Err(MetricError::Empty);
    }
    let (pos, neg) = split_sorted(set);
    Ok(taus
        .iter()
        .map(|&tau| {
            let (tp, fp) = flagged_counts(&pos, &neg, tau);
            ThresholdRow::from_counts(tau, tp, fp, pos.len() - tp, neg.len() - fp)
        })
        .collect())
}

/// The threshold with the highest F1; ties go to the smaller threshold.
pub fn best_f1_threshold(set: &ScoredSet, taus: &[f64]) -> Result<ThresholdRow> {
    let rows = threshold_sweep(set, taus)?;
    best_f1_row(&rows).cloned().ok_or(MetricError::NoThresholds)
}

/// Picks the best-F1 row from an existing sweep.
pub fn best_f1_row(rows: &[ThresholdRow]) -> Option<&ThresholdRow> {
    rows.iter().reduce(|best, row| {
        if row.f1 > best.f1 || (row.f1 == best.f1 && row.tau < best.tau) {
            row
        } else {
            best
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub positives: usize,
    pub hallucination_rate: f64,
    /// `None` when the group holds a single class.
    pub auroc: Option<f64>,
}

/// Per-group count, hallucination rate and AUROC.
pub fn breakdown(set: &ScoredSet, group_key: &str) -> Result<BTreeMap<String, GroupStats>> {
    let mut groups: BTreeMap<String, Vec<ScoredSample>> = BTreeMap::new();
    for (index, s) in set.samples().iter().enumerate() {
        let g = s.attrs.get(group_key).ok_or_else(|| MetricError::MissingGroupKey {
            index,
            key: group_key.to_owned(),
        })?;
        groups.entry(g.clone()).or_default().push(s.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(g, samples)| {
            let sub = ScoredSet { samples };
            let positives = sub.positives();
            let stats = GroupStats {
                count: sub.len(),
                positives,
                hallucination_rate: ratio(positives, sub.len()),
                auroc: auroc(&sub).ok(),
            };
            (g, stats)
        })
        .collect())
}

/// `auroc(a) - auroc(b)`.
pub fn delta_auroc(a: &ScoredSet, b: &ScoredSet) -> Result<f64> {
    Ok(auroc(a)? - auroc(b)?)
}

/// Fleiss' kappa. `ratings[i][j]` is the number of raters who put subject
/// `i` in category `j`; every subject must have the same number of raters.
///
/// When all ratings fall in one category the expected agreement is 1 and
/// the ratio is 0/0; that case is reported as perfect agreement (1.0).
pub fn fleiss_kappa(ratings: &[Vec<u32>]) -> Result<f64> {
    let subjects = ratings.len();
    if subjects == 0 {
        return Err(MetricError::InvalidRatings("no subjects".into()));
    }
    let categories = ratings[0].len();
    if categories == 0 {
        return Err(MetricError::InvalidRatings("no categories".into()));
    }
    if let Some(i) = ratings.iter().position(|r| r.len() != categories) {
        return Err(MetricError::InvalidRatings(format!(
            "subject {i} has {} categories, expected {categories}",
            ratings[i].len()
        )));
    }
    let raters: u64 = ratings[0].iter().map(|&c| u64::from(c)).sum();
    if raters < 2 {
        return Err(MetricError::InvalidRatings(format!(
            "need at least 2 raters, found {raters}"
        )));
    }
    if let Some(i) = ratings
        .iter()
        .position(|r| r.iter().map(|&c| u64::from(c)).sum::<u64>() != raters)
    {
        return Err(MetricError::InvalidRatings(format!(
            "subject {i} has a different number of raters"
        )));
    }

    let n = raters as f64;
    let total = subjects as f64 * n;
    let p_bar = ratings
        .iter()
        .map(|r| {
            let agree: f64 = r.iter().map(|&c| f64::from(c) * (f64::from(c) - 1.0)).sum();
            agree / (n * (n - 1.0))
        })
        .sum::<f64>()
        / subjects as f64;
    let p_e: f64 = (0..categories)
        .map(|j| {
            let pj = ratings.iter().map(|r| f64::from(r[j])).sum::<f64>() / total;
            pj * pj
        })
        .sum();
    if p_e >= 1.0 {
        return if p_bar >= 1.0 {
            Ok(1.0)
        } else {
            Err(MetricError::UndefinedKappa(p_bar))
        };
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}
