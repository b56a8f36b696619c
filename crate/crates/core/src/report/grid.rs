use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{default_taus, evaluate, CellReport, EvalReport, ReportError, Result, Subset};
use crate::feature_store::{join_by_sample, FeaturePack, Representation};
use crate::probe::ProbeWeights;
use crate::trainer::{train_packs, TrainConfig, TrainLog};

/// Decoder layers probed for a model with `num_layers` layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGrid {
    pub num_layers: u32,
    pub layers: Vec<u32>,
}

/// `{1, L/4, L/2, 3L/4, L}` with floor division, each clamped into `[1, L]`,
/// deduplicated and ascending.
pub fn layer_grid(num_layers: u32) -> Result<LayerGrid> {
    if num_layers < 1 {
        return Err(ReportError::LayerCount(num_layers));
    }
    let l = u64::from(num_layers);
    let layers: BTreeSet<u32> = [1, l / 4, l / 2, 3 * l / 4, l]
        .into_iter()
        .map(|x| x.clamp(1, l) as u32)
        .collect();
    Ok(LayerGrid {
        num_layers,
        layers: layers.into_iter().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCell {
    pub representation: Representation,
    pub layer: u32,
    /// Relative paths resolve against the manifest's directory.
    pub pack: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<u32>,
    pub cells: Vec<ManifestCell>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub group_by: Vec<String>,
    /// Where `halp grid` writes the report JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Directory for per-cell weights and training logs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_dir: Option<PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn check_cells(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(ReportError::Manifest("no cells".into()));
        }
        if self.taus.is_empty() {
            return Err(ReportError::Manifest("no thresholds".into()));
        }
        self.train.validate()?;
        let mut seen = BTreeSet::new();
        for cell in &self.cells {
            if !seen.insert((cell.representation, cell.layer)) {
                return Err(ReportError::Manifest(format!(
                    "duplicate cell {} layer {}",
                    cell.representation, cell.layer
                )));
            }
            if cell.representation == Representation::VF && cell.layer != 0 {
                return Err(ReportError::Manifest(format!(
                    "VF cell must use layer 0, got {}",
                    cell.layer
                )));
            }
            if let Some(l) = self.num_layers {
                if cell.layer > l {
                    return Err(ReportError::Manifest(format!(
                        "{} layer {} exceeds num_layers {l}",
                        cell.representation, cell.layer
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-cell training artifacts from a grid run.
#[derive(Clone, Debug)]
pub struct CellArtifacts {
    pub representation: Representation,
    pub layer: u32,
    pub weights: ProbeWeights,
    pub log: TrainLog,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub report: EvalReport,
    pub artifacts: Vec<CellArtifacts>,
}

/// Loads and validates every pack named by the manifest before any training
/// happens. Packs must match their cell and share one sample-id universe.
pub fn load_grid_packs(manifest: &RunManifest, base_dir: &Path) -> Result<Vec<FeaturePack>> {
    manifest.check_cells()?;
    let packs = manifest
        .cells
        .iter()
        .map(|cell| {
            let path = base_dir.join(&cell.pack);
            FeaturePack::load(&path).map_err(|e| ReportError::Manifest(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    check_packs(manifest, &packs)?;
    Ok(packs)
}

fn check_packs(manifest: &RunManifest, packs: &[FeaturePack]) -> Result<()> {
    manifest.check_cells()?;
    if packs.len() != manifest.cells.len() {
        return Err(ReportError::Manifest(format!(
            "{} cells but {} packs",
            manifest.cells.len(),
            packs.len()
        )));
    }
    for (cell, pack) in manifest.cells.iter().zip(packs) {
        let h = &pack.header;
        if h.model_id != manifest.model_id || h.representation != cell.representation || h.layer != cell.layer {
            return Err(ReportError::Manifest(format!(
                "pack {} does not match cell {} layer {} of model {}",
                cell.pack.display(),
                cell.representation,
                cell.layer,
                manifest.model_id
            )));
        }
    }
    let joined = join_by_sample(packs)?;
    if !joined.dropped.is_empty() {
        return Err(ReportError::Manifest(format!(
            "{} sample(s) are missing from some packs, e.g. {:?}",
            joined.dropped.len(),
            joined.dropped.iter().next().unwrap()
        )));
    }
    Ok(())
}

/// Trains and evaluates one probe per cell. Cells run on a worker pool of
/// `threads` workers (default: rayon's global pool); the report is sorted by
/// (representation, layer) so output does not depend on scheduling.
pub fn run_grid_packs(manifest: &RunManifest, packs: &[FeaturePack], threads: Option<usize>) -> Result<GridOutcome> {
    check_packs(manifest, packs)?;
    let jobs: Vec<(&ManifestCell, &FeaturePack)> = manifest.cells.iter().zip(packs).collect();
    let run = || {
        jobs.par_iter()
            .map(|&(cell, pack)| run_cell(manifest, cell, pack))
            .collect::<Result<Vec<_>>>()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| ReportError::Manifest(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };

    let (cells, mut artifacts): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut report = EvalReport {
        cells,
        notes: vec![format!(
            "AUROC and thresholds are computed on the {:.0}% validation fold of a stratified split (key: {}, seed {}).",
            (1.0 - manifest.train.split_ratio) * 100.0,
            manifest.train.stratify_key,
            manifest.train.seed
        )],
    };
    report.sort();
    artifacts.sort_by_key(|a: &CellArtifacts| (a.representation, a.layer));
    Ok(GridOutcome { report, artifacts })
}

fn run_cell(manifest: &RunManifest, cell: &ManifestCell, pack: &FeaturePack) -> Result<(CellReport, CellArtifacts)> {
    let outcome = train_packs(std::slice::from_ref(pack), &manifest.train)?;
    let (eval, _) = evaluate(
        &outcome.weights,
        &pack.records,
        Subset::Val,
        &manifest.taus,
        &manifest.group_by,
    )?;
    let report = CellReport {
        model_id: manifest.model_id.clone(),
        representation: cell.representation,
        layer: cell.layer,
        num_layers: manifest.num_layers,
        subset: Subset::Val,
        n_train: Some(outcome.split.train_ids.len()),
        eval,
    };
    let artifacts = CellArtifacts {
        representation: cell.representation,
        layer: cell.layer,
        weights: outcome.weights,
        log: outcome.log,
    };
    Ok((report, artifacts))
}

/// Loads the manifest's packs (failing fast on any invalid pack) and runs the grid.
pub fn run_grid(manifest: &RunManifest, base_dir: &Path, threads: Option<usize>) -> Result<GridOutcome> {
    let packs = load_grid_packs(manifest, base_dir)?;
    run_grid_packs(manifest, &packs, threads)
}
