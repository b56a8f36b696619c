//! Deterministic probe training.
//!
//! A run is a pure function of `(records, TrainConfig)`:
//!
//! 1. Stratified split. Records are grouped by the stratification field,
//!    strata are visited in lexicographic order, ids inside a stratum are
//!    sorted and then shuffled with the stream `split:<stratum>`, and the
//!    first `floor(ratio * n + 0.5)` go to training.
//! 2. Optional standardization, fitted on the training split only.
//! 3. Kaiming-uniform initialization from the `probe-init` stream.
//! 4. `epochs` passes of mini-batch Adam over mean binary cross-entropy.
//!    Training order starts sorted by sample id and is reshuffled every epoch
//!    from one `epoch-shuffle` stream. The final weights are returned; there
//!    is no early stopping.
//!
//! All streams come from [`crate::rng::Stream`] keyed by `config.seed`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::feature_store::{join_by_sample, FeaturePack, FeatureRecord, PackError};
use crate::metrics::{auroc, ScoredSample, ScoredSet};
use crate::probe::{bce_from_logit, init_weights, Gradients, ProbeArch, ProbeError, ProbeWeights, DEFAULT_HIDDEN};
use crate::rng::Stream;

/// Lower bound on the per-dimension standard deviation used for scaling.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no records to train on")]
    Empty,
    #[error("record {index}: missing stratification field {key:?}")]
    MissingStratifyKey { index: usize, key: String },
    #[error("degenerate labels: training split has {positives} hallucinated of {total} records")]
    DegenerateLabels { positives: usize, total: usize },
    #[error("record {index}: vector length {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub stratify_key: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub standardize: bool,
    pub hidden: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 50,
            split_ratio: 0.8,
            seed: 42,
            stratify_key: "hallucination_type".to_owned(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            standardize: false,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub total: usize,
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub strata: BTreeMap<String, StratumCounts>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Round-half-up of `ratio * n`. The small slack absorbs representation
/// error such as `0.7 * 5 = 3.4999999999999996`.
fn train_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 0.5 + 1e-9).floor() as usize).min(n)
}

pub fn stratified_split(records: &[FeatureRecord], config: &TrainConfig) -> Result<SplitAssignment> {
    config.validate()?;
    let mut strata: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for (index, rec) in records.iter().enumerate() {
        let key = rec
            .meta
            .field(&config.stratify_key)
            .ok_or_else(|| TrainError::MissingStratifyKey {
                index,
                key: config.stratify_key.clone(),
            })?;
        strata.entry(key).or_default().push(rec.sample_id());
    }

    let mut split = SplitAssignment::default();
    for (name, mut ids) in strata {
        let n = ids.len();
        let n_train = if n < 2 {
            split.warnings.push(format!(
                "stratum {name:?} has {n} record(s); cannot stratify, assigned to training"
            ));
            n
        } else {
            ids.sort_unstable();
            Stream::new(config.seed, &format!("split:{name}")).shuffle(&mut ids);
            train_count(config.split_ratio, n)
        };
        split.train_ids.extend(ids[..n_train].iter().map(|s| s.to_string()));
        split.val_ids.extend(ids[n_train..].iter().map(|s| s.to_string()));
        split.strata.insert(
            name,
            StratumCounts {
                total: n,
                train: n_train,
                val: n - n_train,
            },
        );
    }
    Ok(split)
}

/// Per-dimension mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f32]> + Clone, dim: usize) -> Self {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for row in rows.clone() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += f64::from(v);
            }
            n += 1;
        }
        if n == 0 {
            return Self {
                mean,
                std: vec![1.0; dim],
            };
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = f64::from(v) - m;
                *s += d * d;
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (m, s))| (f64::from(v) - m) / s.max(STD_FLOOR))
            .collect()
    }
}

/// Adam with bias correction over a flat parameter sequence.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: usize, config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_epsilon,
            t: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = f64>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// `None` when the validation split is empty or single-class.
    pub val_auroc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_ndjson(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch log serializes") + "\n")
            .collect()
    }

    pub fn final_val_auroc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_auroc)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ProbeWeights,
    pub log: TrainLog,
    pub split: SplitAssignment,
}

struct Example {
    x: Vec<f64>,
    label: bool,
    id: String,
}

fn to_examples(records: &[FeatureRecord], ids: &HashSet<&str>, stats: Option<&Standardizer>) -> Vec<Example> {
    records
        .iter()
        .filter(|r| ids.contains(r.sample_id()))
        .map(|r| Example {
            x: match stats {
                Some(s) => s.apply(&r.vector),
                None => r.vector.iter().map(|&v| f64::from(v)).collect(),
            },
            label: r.label,
            id: r.sample_id().to_owned(),
        })
        .collect()
}

pub fn train_probe(records: &[FeatureRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = records.first().ok_or(TrainError::Empty)?;
    let dim = first.vector.len();
    if let Some((index, r)) = records.iter().enumerate().find(|(_, r)| r.vector.len() != dim) {
        return Err(TrainError::DimensionMismatch {
            index,
            expected: dim,
            found: r.vector.len(),
        });
    }

    let split = stratified_split(records, config)?;
    // Work in sample-id order so the result does not depend on input order.
    let mut sorted: Vec<&FeatureRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.sample_id().cmp(b.sample_id()));
    let records: Vec<FeatureRecord> = sorted.into_iter().cloned().collect();
    let records = records.as_slice();
    let train_ids: HashSet<&str> = split.train_ids.iter().map(String::as_str).collect();
    let val_ids: HashSet<&str> = split.val_ids.iter().map(String::as_str).collect();

    let positives = records
        .iter()
        .filter(|r| r.label && train_ids.contains(r.sample_id()))
        .count();
    if positives == 0 || positives == train_ids.len() {
        return Err(TrainError::DegenerateLabels {
            positives,
            total: train_ids.len(),
        });
    }

    let stats = config.standardize.then(|| {
        Standardizer::fit(
            records
                .iter()
                .filter(|r| train_ids.contains(r.sample_id()))
                .map(|r| r.vector.as_slice()),
            dim,
        )
    });
    let train = to_examples(records, &train_ids, stats.as_ref());
    let val = to_examples(records, &val_ids, stats.as_ref());

    let arch = ProbeArch::with_hidden(dim, config.hidden);
    let mut weights = init_weights(arch, config.seed);
    let mut adam = Adam::new(arch.parameter_count(), config);
    let mut grads = Gradients::zeros(&arch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffler = Stream::new(config.seed, "epoch-shuffle");
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        shuffler.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &train[i];
                let cache = weights.forward(&ex.x)?;
                loss_sum += bce_from_logit(cache.logit, ex.label);
                weights.backward_into(&cache, ex.label, scale, &mut grads);
            }
            adam.step(weights.params_mut(), grads.values());
        }
        let val_auroc = if val.is_empty() {
            None
        } else {
            let samples = val
                .iter()
                .map(|ex| Ok(ScoredSample::new(ex.id.clone(), weights.score(&ex.x)?, ex.label)))
                .collect::<Result<Vec<_>>>()?;
            ScoredSet::new(samples).ok().and_then(|s| auroc(&s).ok())
        };
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            val_auroc,
        });
    }

    weights.provenance.train_config_digest = Some(config.digest());
    weights.provenance.train_config = Some(config.clone());
    weights.provenance.standardization = stats;
    Ok(TrainOutcome { weights, log, split })
}

/// Records to train or score on for a set of packs: a single pack is used
/// as-is, several are inner-joined and their vectors concatenated.
pub fn pack_records(packs: &[FeaturePack]) -> Result<Vec<FeatureRecord>> {
    match packs {
        [] => Err(TrainError::Empty),
        [one] => Ok(one.records.clone()),
        many => Ok(join_by_sample(many)?.concatenated()),
    }
}

/// Trains on one or more packs and records their headers in the provenance.
pub fn train_packs(packs: &[FeaturePack], config: &TrainConfig) -> Result<TrainOutcome> {
    let records = pack_records(packs)?;
    let mut outcome = train_probe(&records, config)?;
    outcome.weights.provenance.sources = packs.iter().map(|p| p.header.clone()).collect();
    Ok(outcome)
}
