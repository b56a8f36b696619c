//! Hallucination probes trained on internal representations of
//! vision-language models.
//!
//! Feature packs hold one vector per sample for a (model, representation,
//! layer) cell. A small MLP probe is trained per cell and scored with AUROC,
//! threshold sweeps and group breakdowns; the scores then drive refusal and
//! routing policies.

pub mod feature_store;
pub mod metrics;
pub mod policy;
pub mod probe;
pub mod report;
pub mod rng;
pub mod trainer;
