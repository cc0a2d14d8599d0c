use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, latest_annotations, AnnotationRecord, EmbeddingExpert, EmbeddingVector, LabelSpace, SampleId};

/// The three retrieval experts, in precedence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertId {
    Clip,
    Dinov2,
    Beit,
}

impl ExpertId {
    pub const ALL: [ExpertId; 3] = [ExpertId::Clip, ExpertId::Dinov2, ExpertId::Beit];

    pub fn embedding(self) -> EmbeddingExpert {
        match self {
            ExpertId::Clip => EmbeddingExpert::ClipImage,
            ExpertId::Dinov2 => EmbeddingExpert::Dinov2,
            ExpertId::Beit => EmbeddingExpert::Beit,
        }
    }

    pub fn position(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertId::Clip => "clip",
            ExpertId::Dinov2 => "dinov2",
            ExpertId::Beit => "beit",
        }
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExpertId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExpertId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown expert {s:?}")))
    }
}

/// Per-expert embedding maps, indexed by [`ExpertId::position`].
pub type ExpertStores<'a> = [&'a BTreeMap<SampleId, EmbeddingVector>; 3];

/// One sample's three expert embeddings.
pub type ExpertQuery<'a> = [&'a EmbeddingVector; 3];

pub fn expert_query<'a>(stores: &ExpertStores<'a>, id: &SampleId) -> Result<ExpertQuery<'a>> {
    let get = |e: ExpertId| {
        stores[e.position()]
            .get(id)
            .ok_or_else(|| Error::MissingEmbedding { sample: *id, expert: e.embedding().to_string() })
    };
    Ok([get(ExpertId::Clip)?, get(ExpertId::Dinov2)?, get(ExpertId::Beit)?])
}

/// Labeled vectors of one expert, stored row-major for scanning.
#[derive(Debug, Clone, PartialEq)]
pub struct SubIndex {
    expert: ExpertId,
    dim: usize,
    ids: Vec<SampleId>,
    labels: Vec<usize>,
    data: Vec<f32>,
    /// Unit class means in label-space order; `None` for classes without entries.
    means: Vec<Option<Vec<f32>>>,
}

impl SubIndex {
    fn new(expert: ExpertId, n_classes: usize) -> Self {
        SubIndex { expert, dim: expert.embedding().dim(), ids: Vec::new(), labels: Vec::new(), data: Vec::new(), means: vec![None; n_classes] }
    }

    pub fn expert(&self) -> ExpertId {
        self.expert
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn entry(&self, i: usize) -> (usize, &[f32]) {
        (self.labels[i], &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn entry_id(&self, i: usize) -> SampleId {
        self.ids[i]
    }

    pub fn class_mean(&self, class: usize) -> Option<&[f32]> {
        self.means.get(class).and_then(|m| m.as_deref())
    }

    /// Cosine of every entry against `query`, in entry order.
    pub fn similarities(&self, query: &[f32]) -> Vec<f64> {
        self.data.chunks_exact(self.dim).map(|row| dot(row, query)).collect()
    }

    fn push(&mut self, id: SampleId, label: usize, v: &EmbeddingVector) {
        self.ids.push(id);
        self.labels.push(label);
        self.data.extend_from_slice(v.data());
    }

    fn relabel(&mut self, i: usize, label: usize) {
        self.labels[i] = label;
    }

    fn recompute_means(&mut self) {
        let n_classes = self.means.len();
        let mut sums = vec![vec![0.0f64; self.dim]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (row, &label) in self.data.chunks_exact(self.dim).zip(&self.labels) {
            counts[label] += 1;
            for (s, x) in sums[label].iter_mut().zip(row) {
                *s += *x as f64;
            }
        }
        self.means = sums
            .into_iter()
            .zip(counts)
            .map(|(sum, count)| {
                if count == 0 {
                    return None;
                }
                let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
                // Antipodal vectors can cancel exactly; leave that class without a direction.
                (norm > 0.0).then(|| sum.iter().map(|x| (x / norm) as f32).collect())
            })
            .collect();
    }
}

/// The three sub-indices over a shared label space.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    space: LabelSpace,
    subs: [SubIndex; 3],
    positions: BTreeMap<SampleId, usize>,
}

impl VectorIndex {
    pub fn space(&self) -> &LabelSpace {
        &self.space
    }

    pub fn sub(&self, expert: ExpertId) -> &SubIndex {
        &self.subs[expert.position()]
    }

    pub fn len(&self) -> usize {
        self.subs[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs[0].is_empty()
    }

    pub fn contains(&self, id: &SampleId) -> bool {
        self.positions.contains_key(id)
    }

    /// Exemplar count per class, in label-space order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.space.len()];
        for &l in &self.subs[0].labels {
            counts[l] += 1;
        }
        counts
    }

    fn check_complete(&self) -> Result<()> {
        for (i, count) in self.class_counts().into_iter().enumerate() {
            if count == 0 {
                return Err(Error::IndexBuild(format!("class {} has no exemplars", self.space.class(i))));
            }
        }
        for sub in &self.subs {
            for (i, m) in sub.means.iter().enumerate() {
                if m.is_none() {
                    return Err(Error::IndexBuild(format!(
                        "class {} has a degenerate mean in the {} sub-index",
                        self.space.class(i),
                        sub.expert
                    )));
                }
            }
        }
        Ok(())
    }

    fn insert(&mut self, id: SampleId, label: usize, query: &ExpertQuery<'_>) {
        match self.positions.get(&id) {
            Some(&pos) => {
                for sub in &mut self.subs {
                    sub.relabel(pos, label);
                }
            }
            None => {
                self.positions.insert(id, self.subs[0].len());
                for (sub, v) in self.subs.iter_mut().zip(query) {
                    sub.push(id, label, v);
                }
            }
        }
    }

    fn recompute_means(&mut self) {
        for sub in &mut self.subs {
            sub.recompute_means();
        }
    }
}

fn check_query(id: &SampleId, query: &ExpertQuery<'_>) -> Result<()> {
    for (e, v) in ExpertId::ALL.iter().zip(query) {
        if v.expert() != e.embedding() {
            return Err(Error::Precondition(format!("sample {id}: {} slot holds a {} vector", e, v.expert())));
        }
    }
    Ok(())
}

/// Build the index from the latest annotation of every annotated sample.
/// Entries are ordered by sample id.
pub fn build_index(annotations: &[AnnotationRecord], stores: &ExpertStores<'_>, space: &LabelSpace) -> Result<VectorIndex> {
    let latest = latest_annotations(annotations)?;
    let mut index = VectorIndex {
        space: space.clone(),
        subs: ExpertId::ALL.map(|e| SubIndex::new(e, space.len())),
        positions: BTreeMap::new(),
    };
    for (id, rec) in latest {
        let label = space
            .index_of(&rec.label)
            .ok_or_else(|| Error::IndexBuild(format!("annotation for {id} uses unknown class {}", rec.label)))?;
        let query = expert_query(stores, &id)?;
        check_query(&id, &query)?;
        index.insert(id, label, &query);
    }
    index.recompute_means();
    index.check_complete()?;
    Ok(index)
}

/// Add human-resolved samples. A sample already in the index takes the new
/// label in place; new samples are appended in the given order.
pub fn extend_index(index: &VectorIndex, resolutions: &[AnnotationRecord], stores: &ExpertStores<'_>) -> Result<VectorIndex> {
    let mut next = index.clone();
    if resolutions.is_empty() {
        return Ok(next);
    }
    let latest = latest_annotations(resolutions)?;
    for rec in resolutions {
        if latest.get(&rec.sample_id).map(|r| std::ptr::eq(*r, rec)) != Some(true) {
            continue;
        }
        let label = next
            .space
            .index_of(&rec.label)
            .ok_or_else(|| Error::IndexBuild(format!("resolution for {} uses unknown class {}", rec.sample_id, rec.label)))?;
        let query = expert_query(stores, &rec.sample_id)?;
        check_query(&rec.sample_id, &query)?;
        next.insert(rec.sample_id, label, &query);
    }
    next.recompute_means();
    next.check_complete()?;
    Ok(next)
}
