//! Evaluation reports: scoring packs with a trained probe, the per-cell
//! report schema, grid orchestration and table rendering.
//!
//! The JSON form of [`EvalReport`] is canonical; markdown and CSV are
//! projections of it produced by [`render_report`].

mod grid;
mod render;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::{
    layer_grid, load_grid_packs, run_grid, run_grid_packs, GridOutcome, LayerGrid, ManifestCell, RunManifest,
};
pub use render::{render_report, ReportFormat};

use crate::feature_store::{FeatureRecord, PackError, Representation};
use crate::metrics::{
    auroc, best_f1_row, breakdown, threshold_sweep, GroupStats, MetricError, ScoredSample, ScoredSet, ThresholdRow,
};
use crate::probe::{ProbeError, ProbeWeights};
use crate::trainer::{stratified_split, TrainError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("layer count must be at least 1, got {0}")]
    LayerCount(u32),
    #[error("unknown report format {0:?} (expected md, csv or json)")]
    UnknownFormat(String),
    #[error("weights carry no training config; cannot reconstruct the {0} split")]
    MissingTrainConfig(Subset),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

/// Which records of a pack to evaluate on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    All,
    Train,
    Val,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::All => "all",
            Subset::Train => "train",
            Subset::Val => "val",
        })
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Subset::All),
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            other => Err(format!("unknown subset {other:?} (expected all, train or val)")),
        }
    }
}

/// Metrics for one probe on one set of records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellEval {
    pub n: usize,
    pub positives: usize,
    /// `None` when the evaluated records hold a single class.
    pub auroc: Option<f64>,
    pub threshold_table: Vec<ThresholdRow>,
    pub best_f1: Option<ThresholdRow>,
    /// group key → group value → stats.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, BTreeMap<String, GroupStats>>,
}

/// One (model, representation, layer) cell of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub model_id: String,
    pub representation: Representation,
    pub layer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<u32>,
    #[serde(default)]
    pub subset: Subset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(flatten)]
    pub eval: CellEval,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<CellReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    /// Sorts cells by (model, representation, layer).
    pub fn sort(&mut self) {
        self.cells
            .sort_by(|a, b| (&a.model_id, a.representation, a.layer).cmp(&(&b.model_id, b.representation, b.layer)));
    }

    /// Concatenates reports, e.g. one grid run per model.
    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> EvalReport {
        let mut out = EvalReport::default();
        for r in reports {
            out.cells.extend(r.cells);
            for n in r.notes {
                if !out.notes.contains(&n) {
                    out.notes.push(n);
                }
            }
        }
        out.sort();
        out
    }

    /// Parses either a full report or a single cell report.
    pub fn from_json(text: &str) -> Result<EvalReport> {
        match serde_json::from_str::<EvalReport>(text) {
            Ok(r) => Ok(r),
            Err(full_err) => match serde_json::from_str::<CellReport>(text) {
                Ok(cell) => Ok(EvalReport {
                    cells: vec![cell],
                    notes: Vec::new(),
                }),
                Err(_) => Err(full_err.into()),
            },
        }
    }
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
/// Range points are rounded to 12 decimals so `0.1:0.9:0.1` yields `0.3`,
/// not `0.30000000000000004`.
pub fn parse_taus(text: &str) -> Result<Vec<f64>, String> {
    let bad = || format!("invalid thresholds {text:?}");
    let parts: Vec<&str> = text.split(':').collect();
    let taus = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step): (f64, f64, f64) = (
                start.trim().parse().map_err(|_| bad())?,
                stop.trim().parse().map_err(|_| bad())?,
                step.trim().parse().map_err(|_| bad())?,
            );
            if step.is_nan() || step <= 0.0 || stop < start {
                return Err(bad());
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect()
        }
        [list] => list
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad()),
    };
    if taus.is_empty() || taus.iter().any(|t| !t.is_finite()) {
        return Err(bad());
    }
    Ok(taus)
}

/// The default sweep `{0.1, 0.2, ..., 0.9}`.
pub fn default_taus() -> Vec<f64> {
    parse_taus("0.1:0.9:0.1").expect("static range")
}

/// Restricts records to the requested subset, recomputing the split from
/// the training config stored in the weights.
pub fn select_subset(weights: &ProbeWeights, records: &[FeatureRecord], subset: Subset) -> Result<Vec<FeatureRecord>> {
    if subset == Subset::All {
        return Ok(records.to_vec());
    }
    let config = weights
        .provenance
        .train_config
        .as_ref()
        .ok_or(ReportError::MissingTrainConfig(subset))?;
    let split = stratified_split(records, config)?;
    let ids: HashSet<&str> = match subset {
        Subset::Train => split.train_ids.iter().map(String::as_str).collect(),
        _ => split.val_ids.iter().map(String::as_str).collect(),
    };
    Ok(records
        .iter()
        .filter(|r| ids.contains(r.sample_id()))
        .cloned()
        .collect())
}

/// Scores records; the closed metadata fields become sample attributes.
pub fn score_records(weights: &ProbeWeights, records: &[FeatureRecord]) -> Result<ScoredSet> {
    let samples = records
        .iter()
        .map(|r| {
            let mut s = ScoredSample::new(r.sample_id(), weights.score_features(&r.vector)?, r.label);
            s.attrs = r.meta.attributes();
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredSet::new(samples)?)
}

/// AUROC, threshold sweep, best-F1 row and per-group breakdowns.
pub fn evaluate_scored(set: &ScoredSet, taus: &[f64], group_by: &[String]) -> Result<CellEval> {
    let threshold_table = if set.is_empty() {
        Vec::new()
    } else {
        threshold_sweep(set, taus)?
    };
    let best_f1 = best_f1_row(&threshold_table).cloned();
    let mut groups = BTreeMap::new();
    for key in group_by {
        groups.insert(key.clone(), breakdown(set, key)?);
    }
    Ok(CellEval {
        n: set.len(),
        positives: set.positives(),
        auroc: auroc(set).ok(),
        threshold_table,
        best_f1,
        groups,
    })
}

/// Scores the chosen subset of `records` and evaluates it.
pub fn evaluate(
    weights: &ProbeWeights,
    records: &[FeatureRecord],
    subset: Subset,
    taus: &[f64],
    group_by: &[String],
) -> Result<(CellEval, ScoredSet)> {
    let chosen = select_subset(weights, records, subset)?;
    let set = score_records(weights, &chosen)?;
    Ok((evaluate_scored(&set, taus, group_by)?, set))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taus_range_is_clean() {
        let t = parse_taus("0.1:0.9:0.1").unwrap();
        assert_eq!(t, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(default_taus(), t);
    }

    #[test]
    fn taus_list_and_errors() {
        assert_eq!(parse_taus("0.25, 0.5").unwrap(), vec![0.25, 0.5]);
        assert!(parse_taus("0.9:0.1:0.1").is_err());
        assert!(parse_taus("0.1:0.9:0").is_err());
        assert!(parse_taus("abc").is_err());
        assert!(parse_taus("1:2").is_err());
    }

    #[test]
    fn evaluate_scored_groups_and_best() {
        let mut samples = Vec::new();
        for (i, (s, l, d)) in [(0.9, true, "A"), (0.1, false, "A"), (0.6, true, "B"), (0.4, false, "B")]
            .into_iter()
            .enumerate()
        {
            let mut x = ScoredSample::new(format!("s{i}"), s, l);
            x.attrs.insert("domain".into(), d.into());
            samples.push(x);
        }
        let set = ScoredSet::new(samples).unwrap();
        let e = evaluate_scored(&set, &default_taus(), &["domain".to_string()]).unwrap();
        assert_eq!(e.auroc, Some(1.0));
        assert_eq!(e.threshold_table.len(), 9);
        assert_eq!(e.best_f1.as_ref().unwrap().tau, 0.5);
        assert_eq!(e.groups["domain"].len(), 2);
    }

    #[test]
    fn cell_report_json_has_eval_keys_at_top_level() {
        let cell = CellReport {
            model_id: "m".into(),
            representation: Representation::QT,
            layer: 4,
            num_layers: None,
            subset: Subset::Val,
            n_train: None,
            eval: CellEval {
                n: 0,
                positives: 0,
                auroc: None,
                threshold_table: vec![],
                best_f1: None,
                groups: BTreeMap::new(),
            },
        };
        let v = serde_json::to_value(&cell).unwrap();
        for key in ["auroc", "threshold_table", "best_f1"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let text = serde_json::to_string(&cell).unwrap();
        assert_eq!(EvalReport::from_json(&text).unwrap().cells, vec![cell]);
    }
}
