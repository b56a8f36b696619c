#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use halp_core::feature_store::{
    FeaturePack, FeatureRecord, HallucinationType, HallucinationType as Ht, Representation, SampleMeta,
};
use halp_core::metrics::{GroupStats, ScoredSample, ScoredSet, ThresholdRow};
use halp_core::probe::{init_weights, ProbeArch, ProbeWeights};
use halp_core::report::{CellEval, CellReport, EvalReport, Subset};

pub const DATASETS: [&str; 4] = ["AMBER", "POPE", "MathVista", "HaloQuest"];
pub const DOMAINS: [&str; 3] = ["natural", "math", "chart"];
pub const FORMATS: [&str; 2] = ["yes/no", "open"];

pub fn meta(id: &str, i: usize) -> SampleMeta {
    SampleMeta::new(
        id,
        DATASETS[i % DATASETS.len()],
        DOMAINS[i % DOMAINS.len()],
        HallucinationType::ALL[i % 4],
        FORMATS[i % FORMATS.len()],
    )
}

/// Two isotropic Gaussians whose means differ by `2 * shift` on every axis.
/// Labels alternate, so each hallucination type holds both classes.
pub fn separable_gaussians(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<FeatureRecord> {
    let mut rng = StdRng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let label = (i / 4) % 2 == 0;
            let mu = if label { shift } else { -shift };
            let v = (0..dim).map(|_| (mu + noise.sample(&mut rng)) as f32).collect();
            FeatureRecord::new(meta(&format!("s{i:04}"), i), v, label)
        })
        .collect()
}

pub fn with_shuffled_labels(records: &[FeatureRecord], seed: u64) -> Vec<FeatureRecord> {
    let mut labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    labels.shuffle(&mut StdRng::seed_from_u64(seed));
    records
        .iter()
        .zip(labels)
        .map(|(r, l)| FeatureRecord::new(r.meta.clone(), r.vector.clone(), l))
        .collect()
}

pub fn pack_of(model: &str, rep: Representation, layer: u32, records: Vec<FeatureRecord>) -> FeaturePack {
    let dim = records[0].vector.len() as u32;
    FeaturePack::new(model, rep, layer, dim, records).expect("valid pack")
}

/// Random scored set; when `ties` is set, scores come from a coarse grid.
pub fn random_set(rng: &mut StdRng, n: usize, ties: bool) -> ScoredSet {
    let mut samples: Vec<ScoredSample> = (0..n)
        .map(|i| {
            let score = if ties {
                f64::from(rng.random_range(0..=10u32)) / 10.0
            } else {
                rng.random::<f64>()
            };
            ScoredSample::new(format!("x{i}"), score, rng.random_bool(0.4))
        })
        .collect();
    // Make sure both classes are present.
    samples[0].label = true;
    samples[n - 1].label = false;
    ScoredSet::new(samples).unwrap()
}

/// Quadratic pairwise AUROC: P(s+ > s-) + 0.5 P(s+ = s-).
pub fn pairwise_auroc(set: &ScoredSet) -> f64 {
    let pos: Vec<f64> = set.samples().iter().filter(|s| s.label).map(|s| s.score).collect();
    let neg: Vec<f64> = set.samples().iter().filter(|s| !s.label).map(|s| s.score).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Small probe with every parameter drawn at random, so no ReLU input sits
/// exactly on the kink.
pub fn random_probe(rng: &mut StdRng, input_dim: usize, hidden: [usize; 3]) -> ProbeWeights {
    let mut w = init_weights(ProbeArch::with_hidden(input_dim, hidden), rng.random());
    let normal = Normal::new(0.0, 0.7).unwrap();
    for p in w.params_mut() {
        *p = normal.sample(rng);
    }
    w
}

/// Gradient of the loss by central differences, one parameter at a time.
pub fn numeric_gradient(w: &ProbeWeights, x: &[f64], label: bool, h: f64) -> Vec<f64> {
    let n = w.params().count();
    let mut probe = w.clone();
    (0..n)
        .map(|i| {
            let orig = probe.params().nth(i).unwrap();
            *probe.params_mut().nth(i).unwrap() = orig + h;
            let up = probe.loss(x, label).unwrap();
            *probe.params_mut().nth(i).unwrap() = orig - h;
            let down = probe.loss(x, label).unwrap();
            *probe.params_mut().nth(i).unwrap() = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-3)`: relative error with a floor so gradients
/// that are zero up to rounding do not divide by ~0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Logistic-regression baseline trained by plain gradient descent; an
/// independent check that a fixture is linearly separable.
pub fn linear_baseline_scores(train: &[FeatureRecord], test: &[FeatureRecord]) -> Vec<f64> {
    let dim = train[0].vector.len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..200 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for r in train {
            let z: f64 = b + r.vector.iter().zip(&w).map(|(&x, w)| f64::from(x) * w).sum::<f64>();
            let d = 1.0 / (1.0 + (-z).exp()) - if r.label { 1.0 } else { 0.0 };
            for (g, &x) in gw.iter_mut().zip(&r.vector) {
                *g += d * f64::from(x);
            }
            gb += d;
        }
        let n = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(gw) {
            *wi -= 0.1 * g / n;
        }
        b -= 0.1 * gb / n;
    }
    test.iter()
        .map(|r| {
            let z: f64 = b + r.vector.iter().zip(&w).map(|(&x, w)| f64::from(x) * w).sum::<f64>();
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// Path of the checked-in golden rendering of [`published_fixture_report`].
pub const GOLDEN_MD: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/published_tables.md");

/// (model, VF, VT@L, QT@L) as published. FastVLM's QT cell carries one extra
/// digit (0.61361 for the printed 0.6136): the printed cells average to
/// 0.87325, which formats as 0.8732, while the published column average is
/// 0.8733, so the unrounded value must have been slightly above 0.6136.
pub const TABLE2: [(&str, f64, f64, f64); 8] = [
    ("Gemma3-12B", 0.6736, 0.5956, 0.9349),
    ("FastVLM-7B", 0.6830, 0.7028, 0.61361),
    ("LLaVa-Next-8B", 0.6108, 0.6270, 0.9026),
    ("Molmo-V1-7B", 0.6830, 0.6867, 0.9193),
    ("Qwen2.5-VL-7B", 0.7873, 0.6683, 0.9150),
    ("Llama-3.2-11B-Vision", 0.7703, 0.7377, 0.8959),
    ("Phi4-VL-5.6B", 0.6166, 0.7738, 0.9033),
    ("SmolVLM2-2.2B", 0.7238, 0.6894, 0.9014),
];

const GEMMA_LAYERS: [u32; 5] = [1, 12, 24, 36, 48];
const GEMMA_VT: [f64; 5] = [0.6538, 0.6698, 0.6146, 0.5995, 0.5956];
const GEMMA_QT: [f64; 5] = [0.7165, 0.8119, 0.9247, 0.9315, 0.9349];

/// (type, positives per 10000, VF AUROC, QT AUROC)
const TYPES: [(Ht, usize, f64, f64); 4] = [
    (Ht::AttributeRelated, 1192, 0.567, 0.804),
    (Ht::ObjectRelated, 794, 0.734, 0.878),
    (Ht::Relationship, 606, 0.559, 0.708),
    (Ht::Other, 1347, 0.755, 0.827),
];

fn fixture_cell(model: &str, rep: Representation, layer: u32, auroc: f64) -> CellReport {
    CellReport {
        model_id: model.to_owned(),
        representation: rep,
        layer,
        num_layers: None,
        subset: Subset::Val,
        n_train: None,
        eval: CellEval {
            n: 2000,
            positives: 200,
            auroc: Some(auroc),
            threshold_table: Vec::new(),
            best_f1: None,
            groups: Default::default(),
        },
    }
}

fn type_groups(qt: bool) -> std::collections::BTreeMap<String, std::collections::BTreeMap<String, GroupStats>> {
    let stats = TYPES
        .iter()
        .map(|&(t, pos, vf, q)| {
            let s = GroupStats {
                count: 10000,
                positives: pos,
                hallucination_rate: pos as f64 / 10000.0,
                auroc: Some(if qt { q } else { vf }),
            };
            (t.to_string(), s)
        })
        .collect();
    [("hallucination_type".to_owned(), stats)].into_iter().collect()
}

/// A report seeded with published numbers: the representation table, one
/// model's layer grid and type breakdown, and its best-F1 refusal row.
pub fn published_fixture_report() -> EvalReport {
    let mut cells = Vec::new();
    for &(model, vf, vt, qt) in &TABLE2 {
        if model == "Gemma3-12B" {
            let mut v = fixture_cell(model, Representation::VF, 0, vf);
            v.eval.groups = type_groups(false);
            cells.push(v);
            for (i, &l) in GEMMA_LAYERS.iter().enumerate() {
                cells.push(fixture_cell(model, Representation::VT, l, GEMMA_VT[i]));
                let mut q = fixture_cell(model, Representation::QT, l, GEMMA_QT[i]);
                if l == 48 {
                    q.eval.groups = type_groups(true);
                    // 708/1000 recall, 708/1238 precision.
                    let rows: Vec<ThresholdRow> = [
                        (0.1, 800, 900, 200, 8100),
                        (0.2, 708, 530, 292, 8470),
                        (0.3, 500, 300, 500, 8700),
                    ]
                    .iter()
                    .map(|&(t, tp, fp, fn_, tn)| ThresholdRow::from_counts(t, tp, fp, fn_, tn))
                    .collect();
                    q.eval.best_f1 = Some(rows[1].clone());
                    q.eval.threshold_table = rows;
                }
                cells.push(q);
            }
        } else {
            cells.push(fixture_cell(model, Representation::VF, 0, vf));
            cells.push(fixture_cell(model, Representation::VT, 32, vt));
            cells.push(fixture_cell(model, Representation::QT, 32, qt));
        }
    }
    EvalReport {
        cells,
        notes: vec!["Fixture seeded with published AUROC values.".to_owned()],
    }
}
