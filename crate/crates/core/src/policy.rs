//! Threshold policies driven by probe scores.
//!
//! Both policies act on inputs with `score >= tau`, the same rule as the
//! threshold sweep in [`crate::metrics`]. Early refusal abstains on those
//! inputs; selective routing sends them to a stronger model whose
//! hallucination rate is modeled either as a scalar or, in exact mode, by a
//! second labeled scored set joined on sample id.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{flagged_counts, ratio, split_sorted, ScoredSample, ScoredSet};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("empty scored set")]
    Empty,
    #[error("strong-model hallucination rate {0} is outside [0, 1]")]
    StrongRate(f64),
    #[error("cost {0} must be finite and non-negative")]
    Cost(f64),
    #[error("sample {0:?} has no strong-model outcome")]
    MissingStrongOutcome(String),
    #[error("scores file: {0}")]
    ScoresFile(String),
}

pub type Result<T, E = PolicyError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefusalOutcome {
    pub tau: f64,
    pub total: usize,
    pub refused: usize,
    pub answered: usize,
    pub coverage: f64,
    /// Hallucinations that were refused.
    pub caught: usize,
    /// Hallucinations that were answered.
    pub missed: usize,
    /// `missed / answered`; `None` when nothing was answered.
    pub residual_rate: Option<f64>,
    pub refusal_precision: f64,
    pub refusal_recall: f64,
}

impl RefusalOutcome {
    fn from_counts(tau: f64, positives: usize, negatives: usize, caught: usize, false_refusals: usize) -> Self {
        let total = positives + negatives;
        let refused = caught + false_refusals;
        let answered = total - refused;
        let missed = positives - caught;
        Self {
            tau,
            total,
            refused,
            answered,
            coverage: ratio(answered, total),
            caught,
            missed,
            residual_rate: (answered > 0).then(|| missed as f64 / answered as f64),
            refusal_precision: ratio(caught, refused),
            refusal_recall: ratio(caught, positives),
        }
    }
}

pub fn simulate_refusal(set: &ScoredSet, tau: f64) -> Result<RefusalOutcome> {
    if set.is_empty() {
        return Err(PolicyError::Empty);
    }
    let (pos, neg) = split_sorted(set);
    let (caught, false_refusals) = flagged_counts(&pos, &neg, tau);
    Ok(RefusalOutcome::from_counts(
        tau,
        pos.len(),
        neg.len(),
        caught,
        false_refusals,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingCosts {
    /// Per-query cost of answering with the base model.
    pub base: f64,
    /// Per-query cost of answering with the strong model.
    pub strong: f64,
}

impl RoutingCosts {
    fn check(&self) -> Result<()> {
        for c in [self.base, self.strong] {
            if !(c.is_finite() && c >= 0.0) {
                return Err(PolicyError::Cost(c));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingOutcome {
    pub tau: f64,
    pub total: usize,
    pub routed: usize,
    /// Hallucinations among inputs kept on the base model.
    pub base_hallucinations: usize,
    pub expected_hallucinations: f64,
    pub expected_rate: f64,
    pub expected_cost: f64,
}

/// Routing with a scalar strong-model hallucination rate.
pub fn simulate_routing(set: &ScoredSet, tau: f64, strong_rate: f64, costs: RoutingCosts) -> Result<RoutingOutcome> {
    if set.is_empty() {
        return Err(PolicyError::Empty);
    }
    if !(0.0..=1.0).contains(&strong_rate) {
        return Err(PolicyError::StrongRate(strong_rate));
    }
    costs.check()?;
    let (pos, neg) = split_sorted(set);
    let (routed_pos, routed_neg) = flagged_counts(&pos, &neg, tau);
    let routed = routed_pos + routed_neg;
    let base_hallucinations = pos.len() - routed_pos;
    Ok(routing_outcome(
        tau,
        set.len(),
        routed,
        base_hallucinations,
        routed as f64 * strong_rate,
        costs,
    ))
}

/// Routing with per-sample strong-model labels, joined on sample id.
pub fn simulate_routing_exact(
    base: &ScoredSet,
    strong: &ScoredSet,
    tau: f64,
    costs: RoutingCosts,
) -> Result<RoutingOutcome> {
    if base.is_empty() {
        return Err(PolicyError::Empty);
    }
    costs.check()?;
    let strong_labels: HashMap<&str, bool> = strong
        .samples()
        .iter()
        .map(|s| (s.sample_id.as_str(), s.label))
        .collect();
    let (mut routed, mut base_hallucinations, mut strong_hallucinations) = (0usize, 0usize, 0usize);
    for s in base.samples() {
        if s.score >= tau {
            routed += 1;
            let label = strong_labels
                .get(s.sample_id.as_str())
                .ok_or_else(|| PolicyError::MissingStrongOutcome(s.sample_id.clone()))?;
            strong_hallucinations += usize::from(*label);
        } else {
            base_hallucinations += usize::from(s.label);
        }
    }
    Ok(routing_outcome(
        tau,
        base.len(),
        routed,
        base_hallucinations,
        strong_hallucinations as f64,
        costs,
    ))
}

fn routing_outcome(
    tau: f64,
    total: usize,
    routed: usize,
    base_hallucinations: usize,
    routed_hallucinations: f64,
    costs: RoutingCosts,
) -> RoutingOutcome {
    let expected = base_hallucinations as f64 + routed_hallucinations;
    RoutingOutcome {
        tau,
        total,
        routed,
        base_hallucinations,
        expected_hallucinations: expected,
        expected_rate: expected / total as f64,
        expected_cost: (total - routed) as f64 * costs.base + routed as f64 * costs.strong,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub tau: f64,
    pub coverage: f64,
    pub residual_rate: Option<f64>,
}

/// Coverage / residual-rate trade-off, one point per threshold.
pub fn frontier(set: &ScoredSet, taus: &[f64]) -> Result<Vec<FrontierPoint>> {
    if set.is_empty() {
        return Err(PolicyError::Empty);
    }
    let (pos, neg) = split_sorted(set);
    Ok(taus
        .iter()
        .map(|&tau| {
            let (caught, false_refusals) = flagged_counts(&pos, &neg, tau);
            let o = RefusalOutcome::from_counts(tau, pos.len(), neg.len(), caught, false_refusals);
            FrontierPoint {
                tau,
                coverage: o.coverage,
                residual_rate: o.residual_rate,
            }
        })
        .collect())
}

/// Writes `tau,coverage,residual_rate`; an undefined residual rate is an empty field.
pub fn write_frontier_csv<W: Write>(points: &[FrontierPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| PolicyError::ScoresFile(e.to_string());
    w.write_record(["tau", "coverage", "residual_rate"]).map_err(err)?;
    for p in points {
        w.write_record([
            p.tau.to_string(),
            p.coverage.to_string(),
            p.residual_rate.map(|r| r.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| PolicyError::ScoresFile(e.to_string()))
}

/// Reads a scores CSV: `sample_id,score,label` followed by any metadata
/// columns, which become sample attributes.
pub fn read_scores_csv<R: Read>(input: R) -> Result<ScoredSet> {
    let mut rdr = csv::Reader::from_reader(input);
    let err = |e: csv::Error| PolicyError::ScoresFile(e.to_string());
    let headers = rdr.headers().map_err(err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PolicyError::ScoresFile(format!("missing column {name:?}")))
    };
    let (id_col, score_col, label_col) = (col("sample_id")?, col("score")?, col("label")?);
    let mut samples = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(err)?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let score: f64 = field(score_col)
            .trim()
            .parse()
            .map_err(|_| PolicyError::ScoresFile(format!("row {}: bad score {:?}", line + 1, field(score_col))))?;
        let label = match field(label_col).trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(PolicyError::ScoresFile(format!(
                    "row {}: label must be 0 or 1, got {other:?}",
                    line + 1
                )))
            }
        };
        let mut sample = ScoredSample::new(field(id_col), score, label);
        for (i, h) in headers.iter().enumerate() {
            if i != id_col && i != score_col && i != label_col {
                sample.attrs.insert(h.to_owned(), field(i).to_owned());
            }
        }
        samples.push(sample);
    }
    ScoredSet::new(samples).map_err(|e| PolicyError::ScoresFile(e.to_string()))
}

/// Writes a scores CSV readable by [`read_scores_csv`]. Attribute columns are
/// the union of keys over all samples, in sorted order.
pub fn write_scores_csv<W: Write>(set: &ScoredSet, out: W) -> Result<()> {
    let keys: std::collections::BTreeSet<&str> = set
        .samples()
        .iter()
        .flat_map(|s| s.attrs.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| PolicyError::ScoresFile(e.to_string());
    let mut header = vec!["sample_id", "score", "label"];
    header.extend(keys.iter().copied());
    w.write_record(&header).map_err(err)?;
    for s in set.samples() {
        let mut row = vec![s.sample_id.clone(), s.score.to_string(), u8::from(s.label).to_string()];
        row.extend(keys.iter().map(|k| s.attrs.get(*k).cloned().unwrap_or_default()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| PolicyError::ScoresFile(e.to_string()))
}
