//! Domain types shared by every curation stage.

pub mod container;
pub mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Content-addressed sample identifier: the first 128 bits of the SHA-256 of
/// the raw image bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleId([u8; 16]);

impl SampleId {
    pub fn from_content(bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        SampleId(id)
    }

    pub fn from_raw(raw: [u8; 16]) -> Self {
        SampleId(raw)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SampleId({})", self.to_hex())
    }
}

impl FromStr for SampleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 32 || s.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(Error::Parse(format!("sample id must be 32 lowercase hex chars, got {s:?}")));
        }
        let mut raw = [0u8; 16];
        hex::decode_to_slice(s, &mut raw)
            .map_err(|e| Error::Parse(format!("sample id {s:?}: {e}")))?;
        Ok(SampleId(raw))
    }
}

impl Serialize for SampleId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for SampleId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Lifecycle status of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Raw,
    LowSim,
    Refined,
    Committed,
    Discarded,
    Escalated,
}

impl SampleStatus {
    pub const ALL: [SampleStatus; 6] = [
        SampleStatus::Raw,
        SampleStatus::LowSim,
        SampleStatus::Refined,
        SampleStatus::Committed,
        SampleStatus::Discarded,
        SampleStatus::Escalated,
    ];

    /// Edges of the lifecycle DAG. Staying in place is not a move and is
    /// always permitted.
    pub fn can_transition(self, to: SampleStatus) -> bool {
        use SampleStatus::*;
        self == to
            || matches!(
                (self, to),
                (Raw, LowSim)
                    | (Raw, Refined)
                    | (Refined, Committed)
                    | (Refined, Discarded)
                    | (Refined, Escalated)
                    | (Escalated, Committed)
                    | (Escalated, Discarded)
            )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SampleStatus::Raw => "raw",
            SampleStatus::LowSim => "low_sim",
            SampleStatus::Refined => "refined",
            SampleStatus::Committed => "committed",
            SampleStatus::Discarded => "discarded",
            SampleStatus::Escalated => "escalated",
        }
    }
}

impl fmt::Display for SampleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One crawled image. Field order is the manifest column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub image_path: String,
    pub keyword: String,
    pub description: Option<String>,
    pub status: SampleStatus,
    pub source_lang: String,
}

impl Sample {
    pub fn transition(&mut self, to: SampleStatus) -> Result<()> {
        if !self.status.can_transition(to) {
            return Err(Error::IllegalTransition { sample: self.id, from: self.status, to });
        }
        self.status = to;
        Ok(())
    }
}

/// Embedding producers known to the engine. The discriminant is the
/// expert-id stored in embedding containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingExpert {
    ClipImage = 0,
    ClipText = 1,
    Dinov2 = 2,
    Beit = 3,
}

impl EmbeddingExpert {
    pub const ALL: [EmbeddingExpert; 4] = [
        EmbeddingExpert::ClipImage,
        EmbeddingExpert::ClipText,
        EmbeddingExpert::Dinov2,
        EmbeddingExpert::Beit,
    ];

    pub fn dim(self) -> usize {
        match self {
            EmbeddingExpert::ClipImage | EmbeddingExpert::ClipText => 768,
            EmbeddingExpert::Dinov2 | EmbeddingExpert::Beit => 1024,
        }
    }

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingExpert::ClipImage => "clip_image",
            EmbeddingExpert::ClipText => "clip_text",
            EmbeddingExpert::Dinov2 => "dinov2",
            EmbeddingExpert::Beit => "beit",
        }
    }
}

impl fmt::Display for EmbeddingExpert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingExpert {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown embedding expert {s:?}")))
    }
}

/// Tolerance on the unit-norm invariant of stored vectors.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// An L2-normalized embedding produced by one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    expert: EmbeddingExpert,
    data: Vec<f32>,
}

impl EmbeddingVector {
    /// Normalize `data` to unit length. Fails on wrong dimension, non-finite
    /// values, or a zero vector.
    pub fn normalized(expert: EmbeddingExpert, data: Vec<f32>) -> Result<Self> {
        check_dim(expert, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{expert} embedding contains a non-finite value")));
        }
        let norm = l2_norm(&data);
        if norm == 0.0 {
            return Err(Error::Data(format!("{expert} embedding is the zero vector")));
        }
        let data = data.iter().map(|&v| (v as f64 / norm) as f32).collect();
        Ok(EmbeddingVector { expert, data })
    }

    /// Wrap an already-normalized vector, checking the invariants.
    pub fn from_unit(expert: EmbeddingExpert, data: Vec<f32>) -> Result<Self> {
        check_dim(expert, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{expert} embedding contains a non-finite value")));
        }
        let norm = l2_norm(&data);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Data(format!("{expert} embedding has norm {norm}, expected 1")));
        }
        Ok(EmbeddingVector { expert, data })
    }

    pub fn expert(&self) -> EmbeddingExpert {
        self.expert
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Cosine similarity; both vectors are unit so this is the dot product.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.data, &other.data)
    }
}

fn check_dim(expert: EmbeddingExpert, len: usize) -> Result<()> {
    if len != expert.dim() {
        return Err(Error::Format(format!(
            "{expert} embedding has dim {len}, expected {}",
            expert.dim()
        )));
    }
    Ok(())
}

/// Dot product with a 64-bit accumulator.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn l2_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Class identifier as it appears in configs and label files.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub String);

impl ClassId {
    pub fn new(s: impl Into<String>) -> Self {
        ClassId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: String,
    /// Class-level feature description used to build the relabel prompt.
    #[serde(default)]
    pub description: String,
}

/// Ordered class list plus the trace vocabulary. Class order is the
/// argmax tie-break order everywhere in the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    classes: Vec<ClassDef>,
    noise_class: ClassId,
    traces: Vec<String>,
}

/// The trace value meaning "no trace present".
pub const NO_TRACE: &str = "none";

impl LabelSpace {
    pub fn new(classes: Vec<ClassDef>, noise_class: ClassId, traces: Vec<String>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config("label space has no classes".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &classes {
            if !seen.insert(&c.id) {
                return Err(Error::Config(format!("duplicate class id {}", c.id)));
            }
        }
        if !seen.contains(&noise_class) {
            return Err(Error::Config(format!("noise class {noise_class} is not a declared class")));
        }
        let mut seen_traces = std::collections::BTreeSet::new();
        for t in &traces {
            if !seen_traces.insert(t) {
                return Err(Error::Config(format!("duplicate trace {t:?}")));
            }
        }
        Ok(LabelSpace { classes, noise_class, traces })
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &ClassId> {
        self.classes.iter().map(|c| &c.id)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, id: &ClassId) -> Option<usize> {
        self.classes.iter().position(|c| &c.id == id)
    }

    pub fn class(&self, index: usize) -> &ClassId {
        &self.classes[index].id
    }

    pub fn def(&self, id: &ClassId) -> Option<&ClassDef> {
        self.classes.iter().find(|c| &c.id == id)
    }

    pub fn noise_class(&self) -> &ClassId {
        &self.noise_class
    }

    pub fn is_noise(&self, id: &ClassId) -> bool {
        &self.noise_class == id
    }

    pub fn traces(&self) -> &[String] {
        &self.traces
    }

    /// Traces that carry information, i.e. everything except "none".
    pub fn positive_traces(&self) -> impl Iterator<Item = &String> {
        self.traces.iter().filter(|t| t.as_str() != NO_TRACE)
    }

    pub fn require(&self, id: &ClassId) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::Precondition(format!("class {id} is not in the label space")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationReason {
    Seed,
    ClusterTriage,
    LowFas,
    Boundary,
    Conflict,
}

/// A human label for one sample in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: SampleId,
    pub label: ClassId,
    pub annotator: String,
    pub round: u32,
    pub reason: AnnotationReason,
}

/// Keep only the latest-round annotation per sample; a later round may
/// re-annotate. Duplicated `(sample_id, round)` pairs are rejected.
pub fn latest_annotations(records: &[AnnotationRecord]) -> Result<BTreeMap<SampleId, &AnnotationRecord>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut latest: BTreeMap<SampleId, &AnnotationRecord> = BTreeMap::new();
    for rec in records {
        if !seen.insert((rec.sample_id, rec.round)) {
            return Err(Error::Data(format!(
                "duplicate annotation for sample {} in round {}",
                rec.sample_id, rec.round
            )));
        }
        match latest.get(&rec.sample_id) {
            Some(prev) if prev.round > rec.round => {}
            _ => {
                latest.insert(rec.sample_id, rec);
            }
        }
    }
    Ok(latest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Filter,
    Distill,
    Relabel,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Filter => "filter",
            Stage::Distill => "distill",
            Stage::Relabel => "relabel",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" => Ok(Stage::Filter),
            "distill" => Ok(Stage::Distill),
            "relabel" => Ok(Stage::Relabel),
            other => Err(Error::Parse(format!("unknown stage {other:?}"))),
        }
    }
}

/// Snapshot written at the end of every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: u32,
    pub stage: Stage,
    pub counts: BTreeMap<SampleStatus, u64>,
    /// Rendered as 16 hex chars so the value survives JSON readers that
    /// truncate 64-bit integers.
    #[serde(with = "hex_u64")]
    pub config_hash: u64,
    pub rng_seed: u64,
    /// Size of the stage's candidate pool this round.
    pub pool: u64,
    /// Size of the stage's accepted set this round (refined for filter,
    /// gate-accepted for distill, labeled for relabel).
    pub accepted: u64,
    pub escalated: u64,
    #[serde(default)]
    pub finalized: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RoundState {
    pub fn count_statuses<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> BTreeMap<SampleStatus, u64> {
        let mut counts: BTreeMap<SampleStatus, u64> =
            SampleStatus::ALL.iter().map(|&s| (s, 0)).collect();
        for s in samples {
            *counts.entry(s.status).or_default() += 1;
        }
        counts
    }
}

pub(crate) mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sample_id_is_content_hash() {
        let a = SampleId::from_content(b"same bytes");
        let b = SampleId::from_content(b"same bytes");
        let c = SampleId::from_content(b"other bytes");
        assert_eq!(a, b);
        assert_ne!(a, c);
        let hex = a.to_string();
        assert_eq!(hex.len(), 32);
        assert!(hex.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_eq!(hex.parse::<SampleId>().unwrap(), a);
        assert!(hex.to_uppercase().parse::<SampleId>().is_err());
    }

    #[test]
    fn expert_dims() {
        assert_eq!(EmbeddingExpert::ClipImage.dim(), 768);
        assert_eq!(EmbeddingExpert::ClipText.dim(), 768);
        assert_eq!(EmbeddingExpert::Dinov2.dim(), 1024);
        assert_eq!(EmbeddingExpert::Beit.dim(), 1024);
    }

    #[test]
    fn embedding_rejects_bad_input() {
        assert!(EmbeddingVector::normalized(EmbeddingExpert::ClipImage, vec![1.0; 10]).is_err());
        let mut v = vec![0.0f32; 768];
        assert!(EmbeddingVector::normalized(EmbeddingExpert::ClipImage, v.clone()).is_err());
        v[3] = f32::NAN;
        assert!(EmbeddingVector::normalized(EmbeddingExpert::ClipImage, v).is_err());
        let e = EmbeddingVector::normalized(EmbeddingExpert::ClipImage, vec![2.0; 768]).unwrap();
        assert!((l2_norm(e.data()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn label_space_invariants() {
        let c = |id: &str| ClassDef { id: id.into(), name: id.into(), description: String::new() };
        assert!(LabelSpace::new(vec![c("A"), c("H")], "H".into(), vec![]).is_ok());
        assert!(LabelSpace::new(vec![c("A"), c("A")], "A".into(), vec![]).is_err());
        assert!(LabelSpace::new(vec![c("A")], "H".into(), vec![]).is_err());
    }

    #[test]
    fn latest_annotation_wins_and_duplicates_rejected() {
        let id = SampleId::from_content(b"x");
        let rec = |round, label: &str| AnnotationRecord {
            sample_id: id,
            label: label.into(),
            annotator: "a".into(),
            round,
            reason: AnnotationReason::Seed,
        };
        let recs = vec![rec(2, "B"), rec(0, "A")];
        let latest = latest_annotations(&recs).unwrap();
        assert_eq!(latest[&id].label, ClassId::from("B"));
        assert!(latest_annotations(&[rec(1, "A"), rec(1, "B")]).is_err());
    }

    fn status_strategy() -> impl Strategy<Value = SampleStatus> {
        prop::sample::select(SampleStatus::ALL.to_vec())
    }

    proptest! {
        // Any sequence of requested moves leaves the sample on a path of the
        // lifecycle DAG; rejected moves leave the status untouched.
        #[test]
        fn lifecycle_never_moves_backwards(moves in prop::collection::vec(status_strategy(), 0..20)) {
            let mut s = Sample {
                id: SampleId::from_content(b"p"),
                image_path: "images/p.png".into(),
                keyword: "k".into(),
                description: None,
                status: SampleStatus::Raw,
                source_lang: "en".into(),
            };
            let rank = |st: SampleStatus| match st {
                SampleStatus::Raw => 0,
                SampleStatus::LowSim | SampleStatus::Refined => 1,
                SampleStatus::Escalated => 2,
                SampleStatus::Committed | SampleStatus::Discarded => 3,
            };
            for to in moves {
                let before = s.status;
                match s.transition(to) {
                    Ok(()) => prop_assert!(rank(s.status) >= rank(before)),
                    Err(_) => prop_assert_eq!(s.status, before),
                }
            }
        }
    }
}
