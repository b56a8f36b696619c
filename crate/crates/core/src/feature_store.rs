//! Feature packs: the on-disk container for captured representations.
//!
//! One pack holds every sample's vector for a single
//! (model, representation, layer) triple. Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "HALPFP01"
//! header     u32 len + UTF-8 JSON {model_id, representation, layer, dim, count, dtype}
//! record × count:
//!     u16 len + UTF-8 sample_id
//!     u8  label (0 truthful, 1 hallucinated)
//!     u32 len + UTF-8 JSON SampleMeta
//!     dim × f32 vector payload
//! ```
//!
//! Readers re-check every invariant and report the offending record index.
//! Nothing in the reader trusts a length field before checking it against
//! the bytes that remain, so arbitrary input never panics or over-allocates.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PACK_MAGIC: &[u8; 8] = b"HALPFP01";
pub const DTYPE_F32LE: &str = "f32le";

/// Source benchmarks a sample may come from.
pub const KNOWN_DATASETS: [&str; 7] = [
    "AMBER",
    "POPE",
    "MathVista",
    "MME",
    "HaloQuest",
    "HallusionBench",
    "custom",
];

#[derive(Debug, Error)]
pub enum PackError {
    #[error("bad magic: stream does not start with \"HALPFP01\"")]
    BadMagic,
    #[error("truncated stream at byte offset {offset}: needed {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("header/count mismatch: header declares {declared} records, {found} present")]
    CountMismatch { declared: u64, found: u64 },
    #[error("{extra} trailing bytes after the last record at byte offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("record {index}: {field} is not valid UTF-8")]
    Utf8 { index: usize, field: &'static str },
    #[error("record {index}: {field} exceeds the length field's range")]
    FieldTooLong { index: usize, field: &'static str },
    #[error("record {index}: label byte {value} is not 0 or 1")]
    InvalidLabel { index: usize, value: u8 },
    #[error("record {index}: invalid metadata: {reason}")]
    InvalidMeta { index: usize, reason: String },
    #[error("record {index}: empty sample_id")]
    EmptySampleId { index: usize },
    #[error("record {index}: sample_id {record:?} disagrees with metadata sample_id {meta:?}")]
    SampleIdMismatch { index: usize, record: String, meta: String },
    #[error("record {index}: duplicate sample_id {id:?}")]
    DuplicateSampleId { index: usize, id: String },
    #[error("record {index}: vector length {found} does not match pack dim {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {index}: non-finite value at component {component}")]
    NonFinite { index: usize, component: usize },
    #[error("sample {id:?} carries conflicting labels across packs")]
    LabelConflict { id: String },
    #[error("join needs at least one pack")]
    EmptyJoin,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PackError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Representation {
    /// Mean-pooled vision-encoder output.
    VF,
    /// Decoder hidden state at the last vision-token position.
    VT,
    /// Decoder hidden state at the last position of the full input.
    QT,
}

impl Representation {
    pub const ALL: [Representation; 3] = [Representation::VF, Representation::VT, Representation::QT];

    pub fn as_str(self) -> &'static str {
        match self {
            Representation::VF => "VF",
            Representation::VT => "VT",
            Representation::QT => "QT",
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Representation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "VF" | "vf" => Ok(Representation::VF),
            "VT" | "vt" => Ok(Representation::VT),
            "QT" | "qt" => Ok(Representation::QT),
            other => Err(format!("unknown representation {other:?} (expected VF, VT or QT)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HallucinationType {
    #[serde(rename = "Object-Related")]
    ObjectRelated,
    #[serde(rename = "Attribute-Related")]
    AttributeRelated,
    #[serde(rename = "Relationship")]
    Relationship,
    #[serde(rename = "Other")]
    Other,
}

impl HallucinationType {
    pub const ALL: [HallucinationType; 4] = [
        HallucinationType::ObjectRelated,
        HallucinationType::AttributeRelated,
        HallucinationType::Relationship,
        HallucinationType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HallucinationType::ObjectRelated => "Object-Related",
            HallucinationType::AttributeRelated => "Attribute-Related",
            HallucinationType::Relationship => "Relationship",
            HallucinationType::Other => "Other",
        }
    }
}

impl fmt::Display for HallucinationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HallucinationType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown hallucination_type {s:?}"))
    }
}

/// Per-sample metadata. Keys outside the closed set are kept in `extra` so
/// they survive a read/write cycle, but nothing in the toolkit relies on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub dataset: String,
    pub domain: String,
    pub hallucination_type: HallucinationType,
    pub answer_format: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl SampleMeta {
    pub fn new(
        sample_id: impl Into<String>,
        dataset: impl Into<String>,
        domain: impl Into<String>,
        hallucination_type: HallucinationType,
        answer_format: impl Into<String>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            dataset: dataset.into(),
            domain: domain.into(),
            hallucination_type,
            answer_format: answer_format.into(),
            extra: BTreeMap::new(),
        }
    }

    /// Looks up a metadata field by name, including preserved extra keys.
    pub fn field(&self, name: &str) -> Option<String> {
        match name {
            "sample_id" => Some(self.sample_id.clone()),
            "dataset" => Some(self.dataset.clone()),
            "domain" => Some(self.domain.clone()),
            "hallucination_type" => Some(self.hallucination_type.as_str().to_owned()),
            "answer_format" => Some(self.answer_format.clone()),
            other => self.extra.get(other).map(|v| match v {
                serde_json::Value::String(s) => s.clone(),
                v => v.to_string(),
            }),
        }
    }

    /// The closed key set as string attributes, for scored-set metadata.
    pub fn attributes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("dataset".to_owned(), self.dataset.clone());
        out.insert("domain".to_owned(), self.domain.clone());
        out.insert(
            "hallucination_type".to_owned(),
            self.hallucination_type.as_str().to_owned(),
        );
        out.insert("answer_format".to_owned(), self.answer_format.clone());
        out
    }

    fn check(&self) -> Result<(), String> {
        if !KNOWN_DATASETS.contains(&self.dataset.as_str()) {
            return Err(format!("unknown dataset {:?}", self.dataset));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub meta: SampleMeta,
    pub vector: Vec<f32>,
    /// `true` when the model hallucinated on this sample.
    pub label: bool,
}

impl FeatureRecord {
    pub fn new(meta: SampleMeta, vector: Vec<f32>, label: bool) -> Self {
        Self { meta, vector, label }
    }

    pub fn sample_id(&self) -> &str {
        &self.meta.sample_id
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackHeader {
    pub model_id: String,
    pub representation: Representation,
    pub layer: u32,
    pub dim: u32,
    pub count: u64,
    pub dtype: String,
}

impl PackHeader {
    pub fn new(model_id: impl Into<String>, representation: Representation, layer: u32, dim: u32) -> Self {
        Self {
            model_id: model_id.into(),
            representation,
            layer,
            dim,
            count: 0,
            dtype: DTYPE_F32LE.to_owned(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.representation == Representation::VF && self.layer != 0 {
            return Err(PackError::Header(format!(
                "VF packs must use layer 0, found {}",
                self.layer
            )));
        }
        if self.dim == 0 {
            return Err(PackError::Header("dim must be positive".into()));
        }
        if self.dtype != DTYPE_F32LE {
            return Err(PackError::Header(format!(
                "unsupported dtype {:?} (expected \"{DTYPE_F32LE}\")",
                self.dtype
            )));
        }
        Ok(())
    }
}

impl fmt::Display for PackHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "model={} rep={} layer={} dim={} count={} dtype={}",
            self.model_id, self.representation, self.layer, self.dim, self.count, self.dtype
        )
    }
}

/// A validated header plus its records.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    pub header: PackHeader,
    pub records: Vec<FeatureRecord>,
}

impl FeaturePack {
    /// Builds a pack, filling in `count` and validating everything.
    pub fn new(
        model_id: impl Into<String>,
        representation: Representation,
        layer: u32,
        dim: u32,
        records: Vec<FeatureRecord>,
    ) -> Result<Self> {
        let mut header = PackHeader::new(model_id, representation, layer, dim);
        header.count = records.len() as u64;
        validate(&header, &records)?;
        Ok(Self { header, records })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_pack(&self.header, &self.records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_pack(bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_pack(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }
}

/// Checks a header and its records against every pack invariant.
pub fn validate(header: &PackHeader, records: &[FeatureRecord]) -> Result<()> {
    header.validate()?;
    if header.count != records.len() as u64 {
        return Err(PackError::CountMismatch {
            declared: header.count,
            found: records.len() as u64,
        });
    }
    let mut seen = HashSet::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        check_record(index, rec, header.dim as usize)?;
        if !seen.insert(rec.sample_id()) {
            return Err(PackError::DuplicateSampleId {
                index,
                id: rec.sample_id().to_owned(),
            });
        }
    }
    Ok(())
}

fn check_record(index: usize, rec: &FeatureRecord, dim: usize) -> Result<()> {
    if rec.meta.sample_id.is_empty() {
        return Err(PackError::EmptySampleId { index });
    }
    if rec.meta.sample_id.len() > u16::MAX as usize {
        return Err(PackError::FieldTooLong {
            index,
            field: "sample_id",
        });
    }
    rec.meta
        .check()
        .map_err(|reason| PackError::InvalidMeta { index, reason })?;
    if rec.vector.len() != dim {
        return Err(PackError::DimensionMismatch {
            index,
            expected: dim,
            found: rec.vector.len(),
        });
    }
    if let Some(component) = rec.vector.iter().position(|v| !v.is_finite()) {
        return Err(PackError::NonFinite { index, component });
    }
    Ok(())
}

/// Serializes a pack. Identical inputs always give identical bytes.
pub fn write_pack(header: &PackHeader, records: &[FeatureRecord]) -> Result<Vec<u8>> {
    validate(header, records)?;
    let header_json = serde_json::to_vec(header).map_err(|e| PackError::Header(e.to_string()))?;
    let dim = header.dim as usize;
    let mut out = Vec::with_capacity(8 + 4 + header_json.len() + records.len() * (dim * 4 + 64));
    out.extend_from_slice(PACK_MAGIC);
    out.extend_from_slice(&len_u32(header_json.len(), || PackError::Header("header too long".into()))?.to_le_bytes());
    out.extend_from_slice(&header_json);
    for (index, rec) in records.iter().enumerate() {
        let id = rec.meta.sample_id.as_bytes();
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        out.push(rec.label as u8);
        let meta = serde_json::to_vec(&rec.meta).map_err(|e| PackError::InvalidMeta {
            index,
            reason: e.to_string(),
        })?;
        out.extend_from_slice(&len_u32(meta.len(), || PackError::FieldTooLong { index, field: "meta" })?.to_le_bytes());
        out.extend_from_slice(&meta);
        for v in &rec.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(len: usize, err: impl FnOnce() -> PackError) -> Result<u32> {
    u32::try_from(len).map_err(|_| err())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(PackError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses and fully validates a pack.
pub fn read_pack(bytes: &[u8]) -> Result<FeaturePack> {
    if bytes.len() < PACK_MAGIC.len() || &bytes[..PACK_MAGIC.len()] != PACK_MAGIC {
        return Err(PackError::BadMagic);
    }
    let mut r = Reader {
        buf: bytes,
        pos: PACK_MAGIC.len(),
    };
    let header_len = r.u32()? as usize;
    let header_bytes = r.take(header_len)?;
    let header: PackHeader = serde_json::from_slice(header_bytes).map_err(|e| PackError::Header(e.to_string()))?;
    header.validate()?;

    let dim = header.dim as usize;
    let payload_len = dim
        .checked_mul(4)
        .ok_or_else(|| PackError::Header("dim too large".into()))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for index in 0..header.count {
        let index = index as usize;
        if r.at_end() {
            return Err(PackError::CountMismatch {
                declared: header.count,
                found: index as u64,
            });
        }
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| PackError::Utf8 {
                index,
                field: "sample_id",
            })?
            .to_owned();
        let label = match r.u8()? {
            0 => false,
            1 => true,
            value => return Err(PackError::InvalidLabel { index, value }),
        };
        let meta_len = r.u32()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta_str = std::str::from_utf8(meta_bytes).map_err(|_| PackError::Utf8 { index, field: "meta" })?;
        let meta: SampleMeta = serde_json::from_str(meta_str).map_err(|e| PackError::InvalidMeta {
            index,
            reason: e.to_string(),
        })?;
        if meta.sample_id != id {
            return Err(PackError::SampleIdMismatch {
                index,
                record: id,
                meta: meta.sample_id,
            });
        }
        let payload = r.take(payload_len)?;
        let vector: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let rec = FeatureRecord { meta, vector, label };
        check_record(index, &rec, dim)?;
        if !seen.insert(rec.meta.sample_id.clone()) {
            return Err(PackError::DuplicateSampleId {
                index,
                id: rec.meta.sample_id,
            });
        }
        records.push(rec);
    }
    if !r.at_end() {
        return Err(PackError::TrailingBytes {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        });
    }
    Ok(FeaturePack { header, records })
}

/// One sample present in every joined pack.
#[derive(Clone, Debug, PartialEq)]
pub struct JoinedRow {
    /// Metadata as stored in the first pack.
    pub meta: SampleMeta,
    pub label: bool,
    /// One vector per input pack, in pack order.
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JoinedTable {
    pub headers: Vec<PackHeader>,
    pub rows: BTreeMap<String, JoinedRow>,
    /// Ids present in some but not all packs.
    pub dropped: BTreeSet<String>,
}

impl JoinedTable {
    /// Records whose vector is the concatenation of every pack's vector,
    /// ordered by sample id.
    pub fn concatenated(&self) -> Vec<FeatureRecord> {
        self.rows
            .values()
            .map(|row| FeatureRecord {
                meta: row.meta.clone(),
                vector: row.vectors.concat(),
                label: row.label,
            })
            .collect()
    }

    pub fn total_dim(&self) -> usize {
        self.headers.iter().map(|h| h.dim as usize).sum()
    }
}

/// Inner join on sample id. A sample appearing in two or more packs with
/// different labels is an error even if it is later dropped by the join.
pub fn join_by_sample(packs: &[FeaturePack]) -> Result<JoinedTable> {
    if packs.is_empty() {
        return Err(PackError::EmptyJoin);
    }
    let mut labels: BTreeMap<&str, bool> = BTreeMap::new();
    let mut presence: BTreeMap<&str, usize> = BTreeMap::new();
    for pack in packs {
        for rec in &pack.records {
            let id = rec.sample_id();
            match labels.get(id) {
                Some(&l) if l != rec.label => {
                    return Err(PackError::LabelConflict { id: id.to_owned() });
                }
                Some(_) => {}
                None => {
                    labels.insert(id, rec.label);
                }
            }
            *presence.entry(id).or_default() += 1;
        }
    }

    let lookups: Vec<BTreeMap<&str, &FeatureRecord>> = packs
        .iter()
        .map(|p| p.records.iter().map(|r| (r.sample_id(), r)).collect())
        .collect();
    let mut rows = BTreeMap::new();
    let mut dropped = BTreeSet::new();
    for (&id, &n) in &presence {
        if n != packs.len() {
            dropped.insert(id.to_owned());
            continue;
        }
        let vectors = lookups.iter().map(|m| m[id].vector.clone()).collect();
        let base = lookups[0][id];
        rows.insert(
            id.to_owned(),
            JoinedRow {
                meta: base.meta.clone(),
                label: base.label,
                vectors,
            },
        );
    }
    Ok(JoinedTable {
        headers: packs.iter().map(|p| p.header.clone()).collect(),
        rows,
        dropped,
    })
}

/// Order-preserving subset of records whose metadata satisfies `pred`.
pub fn filter_records<P>(records: &[FeatureRecord], pred: P) -> Vec<FeatureRecord>
where
    P: Fn(&SampleMeta) -> bool,
{
    records.iter().filter(|r| pred(&r.meta)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str, htype: HallucinationType, domain: &str) -> SampleMeta {
        SampleMeta::new(id, "custom", domain, htype, "Yes/No")
    }

    fn rec(id: &str, vector: Vec<f32>, label: bool) -> FeatureRecord {
        FeatureRecord::new(meta(id, HallucinationType::Other, "General QA"), vector, label)
    }

    fn pack(ids: &[(&str, bool)]) -> FeaturePack {
        let records = ids.iter().map(|&(id, l)| rec(id, vec![0.5, -1.0], l)).collect();
        FeaturePack::new("m", Representation::QT, 4, 2, records).unwrap()
    }

    #[test]
    fn empty_pack_round_trips() {
        let p = FeaturePack::new("m", Representation::VT, 3, 4, vec![]).unwrap();
        let bytes = p.to_bytes().unwrap();
        let back = read_pack(&bytes).unwrap();
        assert_eq!(back.header.count, 0);
        assert_eq!(back, p);
    }

    #[test]
    fn single_record_payload_is_eight_bytes() {
        let p = FeaturePack::new("m", Representation::VF, 0, 2, vec![rec("a", vec![1.0, 2.0], true)]).unwrap();
        let bytes = p.to_bytes().unwrap();
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(&tail[..4], &1.0f32.to_le_bytes());
        assert_eq!(&tail[4..], &2.0f32.to_le_bytes());
        // magic + header + id(2+1) + label + meta(4+len) + 8
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta_len_at = 12 + header_len + 2 + 1 + 1;
        let meta_len = u32::from_le_bytes(bytes[meta_len_at..meta_len_at + 4].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), meta_len_at + 4 + meta_len + 8);
        assert_eq!(bytes[meta_len_at - 1], 1);
    }

    #[test]
    fn header_json_has_exact_keys() {
        let p = pack(&[("a", true)]);
        let bytes = p.to_bytes().unwrap();
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            ["count", "dim", "dtype", "layer", "model_id", "representation"]
                .into_iter()
                .collect()
        );
    }

    #[test]
    fn truncated_mid_vector_names_offset() {
        let bytes = pack(&[("a", true)]).to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match read_pack(cut) {
            Err(PackError::Truncated {
                offset,
                needed,
                available,
            }) => {
                assert_eq!(offset, bytes.len() - 8);
                assert_eq!(needed, 8);
                assert_eq!(available, 5);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_detected() {
        let p = pack(&[("a", true)]);
        let mut header = p.header.clone();
        header.count = 2;
        let header_json = serde_json::to_vec(&header).unwrap();
        let old = p.to_bytes().unwrap();
        let old_len = u32::from_le_bytes(old[8..12].try_into().unwrap()) as usize;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(PACK_MAGIC);
        bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        bytes.extend_from_slice(&old[12 + old_len..]);
        assert!(matches!(
            read_pack(&bytes),
            Err(PackError::CountMismatch { declared: 2, found: 1 })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = pack(&[("a", true)]).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_pack(&bytes), Err(PackError::BadMagic)));
        assert!(matches!(read_pack(b"HAL"), Err(PackError::BadMagic)));
    }

    #[test]
    fn write_rejects_each_violation_class() {
        let nan = vec![rec("a", vec![f32::NAN, 0.0], false)];
        assert!(matches!(
            FeaturePack::new("m", Representation::QT, 1, 2, nan),
            Err(PackError::NonFinite { index: 0, component: 0 })
        ));
        let dup = vec![rec("a", vec![0.0, 0.0], false), rec("a", vec![0.0, 0.0], false)];
        assert!(matches!(
            FeaturePack::new("m", Representation::QT, 1, 2, dup),
            Err(PackError::DuplicateSampleId { index: 1, .. })
        ));
        let wrong_dim = vec![rec("a", vec![0.0; 3], false)];
        assert!(matches!(
            FeaturePack::new("m", Representation::QT, 1, 2, wrong_dim),
            Err(PackError::DimensionMismatch {
                index: 0,
                expected: 2,
                found: 3
            })
        ));
        let mut bad_ds = rec("a", vec![0.0, 0.0], false);
        bad_ds.meta.dataset = "ImageNet".into();
        assert!(matches!(
            FeaturePack::new("m", Representation::QT, 1, 2, vec![bad_ds]),
            Err(PackError::InvalidMeta { index: 0, .. })
        ));
        assert!(matches!(
            FeaturePack::new("m", Representation::VF, 3, 2, vec![]),
            Err(PackError::Header(_))
        ));
    }

    #[test]
    fn unknown_hallucination_type_rejected_on_read() {
        let bytes = pack(&[("a", true)]).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        assert!(text.contains("\"Other\""));
        // Same length replacement keeps all length fields valid.
        let patched = text.replace("\"Other\"", "\"Ot_er\"");
        assert!(matches!(
            read_pack(patched.as_bytes()),
            Err(PackError::InvalidMeta { index: 0, .. })
        ));
    }

    #[test]
    fn extra_meta_keys_survive() {
        let mut r = rec("a", vec![1.0, 2.0], false);
        r.meta.extra.insert("source_split".into(), serde_json::json!("val"));
        let p = FeaturePack::new("m", Representation::QT, 1, 2, vec![r]).unwrap();
        let back = read_pack(&p.to_bytes().unwrap()).unwrap();
        assert_eq!(back.records[0].meta.field("source_split").as_deref(), Some("val"));
        assert_eq!(back, p);
    }

    #[test]
    fn join_identical_sets() {
        let a = pack(&[("a", true), ("b", false)]);
        let b = pack(&[("b", false), ("a", true)]);
        let t = join_by_sample(&[a, b]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.dropped.is_empty());
        assert_eq!(t.rows["a"].vectors.len(), 2);
    }

    #[test]
    fn join_is_intersection() {
        let a = pack(&[("a", true), ("b", false)]);
        let b = pack(&[("b", false), ("c", true)]);
        let t = join_by_sample(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.rows.keys().collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(t.dropped.iter().collect::<Vec<_>>(), vec!["a", "c"]);
        let t2 = join_by_sample(&[b, a]).unwrap();
        assert_eq!(t.rows.keys().collect::<Vec<_>>(), t2.rows.keys().collect::<Vec<_>>());
    }

    #[test]
    fn join_label_conflict_names_id() {
        let a = pack(&[("a", true), ("b", false)]);
        let b = pack(&[("b", true)]);
        let err = join_by_sample(&[a, b]).unwrap_err();
        assert!(matches!(&err, PackError::LabelConflict { id } if id == "b"));
        assert!(err.to_string().contains("\"b\""));
    }

    #[test]
    fn join_of_nothing_is_error() {
        assert!(matches!(join_by_sample(&[]), Err(PackError::EmptyJoin)));
    }

    #[test]
    fn concatenated_vectors_follow_pack_order() {
        let a = pack(&[("a", true)]);
        let mut b = pack(&[("a", true)]);
        b.records[0].vector = vec![9.0, 8.0];
        let t = join_by_sample(&[a, b]).unwrap();
        assert_eq!(t.concatenated()[0].vector, vec![0.5, -1.0, 9.0, 8.0]);
        assert_eq!(t.total_dim(), 4);
    }

    #[test]
    fn filter_keeps_order() {
        let types = [
            HallucinationType::Relationship,
            HallucinationType::Other,
            HallucinationType::Relationship,
            HallucinationType::ObjectRelated,
        ];
        let records: Vec<_> = types
            .iter()
            .enumerate()
            .map(|(i, &t)| FeatureRecord::new(meta(&format!("s{i}"), t, "General QA"), vec![0.0], false))
            .collect();
        let out = filter_records(&records, |m| m.hallucination_type == HallucinationType::Relationship);
        let ids: Vec<_> = out.iter().map(|r| r.sample_id()).collect();
        assert_eq!(ids, vec!["s0", "s2"]);
        assert!(filter_records(&records, |m| m.domain == "nope").is_empty());
    }

    #[test]
    fn filter_by_domain_counts() {
        let domains = [
            "Text & OCR",
            "General QA",
            "Text & OCR",
            "Spatial Reasoning",
            "Attribute Recognition",
            "General QA",
            "Visual Understanding",
            "Text & OCR",
            "Math & Calculation",
            "Temporal & Video",
        ];
        let records: Vec<_> = domains
            .iter()
            .enumerate()
            .map(|(i, d)| FeatureRecord::new(meta(&format!("s{i}"), HallucinationType::Other, d), vec![0.0], false))
            .collect();
        let expected = domains.iter().filter(|d| **d == "Text & OCR").count();
        assert_eq!(expected, 3);
        assert_eq!(filter_records(&records, |m| m.domain == "Text & OCR").len(), expected);
    }
}
