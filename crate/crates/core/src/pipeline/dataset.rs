//! Label stores under `labels/` and the curated dataset built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{read_jsonl_or_empty, write_jsonl};
use crate::metrics::{
    confusion_matrix, csv_field, macro_prf, nrr_cdrr, perfect_match, ConfusionMatrix, EvalReference, MetricsReport, SemanticTruth,
    SynonymTable,
};
use crate::model::{ClassId, SampleId, SampleStatus};
use crate::project::Project;
use crate::revlm::{Provenance, SemanticLabel};

pub const COARSE_LABELS: &str = "coarse.jsonl";
pub const SEMANTIC_LABELS: &str = "semantic.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Engine,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseLabel {
    pub sample_id: SampleId,
    pub label: ClassId,
    #[serde(default)]
    pub topic_conf: Option<f64>,
    #[serde(default)]
    pub label_conf: Option<f64>,
    pub round: u32,
    pub source: LabelSource,
}

pub fn load_coarse(project: &Project) -> Result<BTreeMap<SampleId, CoarseLabel>> {
    let rows: Vec<CoarseLabel> = read_jsonl_or_empty(&project.labels_path(COARSE_LABELS))?;
    Ok(rows.into_iter().map(|r| (r.sample_id, r)).collect())
}

pub(crate) fn upsert_coarse(project: &Project, items: impl IntoIterator<Item = CoarseLabel>) -> Result<()> {
    let mut all = load_coarse(project)?;
    for c in items {
        all.insert(c.sample_id, c);
    }
    write_jsonl(&project.labels_path(COARSE_LABELS), &all.into_values().collect::<Vec<_>>())
}

pub fn load_semantic(project: &Project) -> Result<BTreeMap<SampleId, SemanticLabel>> {
    let rows: Vec<SemanticLabel> = read_jsonl_or_empty(&project.labels_path(SEMANTIC_LABELS))?;
    Ok(rows.into_iter().map(|r| (r.sample_id, r)).collect())
}

pub(crate) fn upsert_semantic(project: &Project, items: impl IntoIterator<Item = SemanticLabel>) -> Result<()> {
    let mut all = load_semantic(project)?;
    for s in items {
        all.insert(s.sample_id, s);
    }
    write_jsonl(&project.labels_path(SEMANTIC_LABELS), &all.into_values().collect::<Vec<_>>())
}

/// One committed sample of the curated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub sample_id: SampleId,
    pub image_path: String,
    pub keyword: String,
    pub category: ClassId,
    pub label_source: LabelSource,
    /// Present once the sample has been relabeled.
    pub traces: Option<BTreeSet<String>>,
    pub provenance: Option<Provenance>,
}

/// Committed samples with a coarse label, in sample-id order. A semantic
/// label overrides the category.
pub fn dataset_rows(project: &Project) -> Result<Vec<DatasetRow>> {
    let coarse = load_coarse(project)?;
    let semantic = load_semantic(project)?;
    let mut samples = project.load_manifest()?;
    samples.sort_by_key(|s| s.id);
    Ok(samples
        .into_iter()
        .filter(|s| s.status == SampleStatus::Committed)
        .filter_map(|s| {
            let c = coarse.get(&s.id)?;
            let sem = semantic.get(&s.id);
            Some(DatasetRow {
                sample_id: s.id,
                image_path: s.image_path,
                keyword: s.keyword,
                category: sem.map_or_else(|| c.label.clone(), |l| l.category.clone()),
                label_source: c.source,
                traces: sem.map(|l| l.traces.clone()),
                provenance: sem.map(|l| l.provenance),
            })
        })
        .collect())
}

pub fn rows_to_csv(rows: &[DatasetRow]) -> String {
    let mut out = String::from("sample_id,image_path,keyword,category,label_source,traces,provenance\n");
    for r in rows {
        let traces = r.traces.as_ref().map(|t| t.iter().cloned().collect::<Vec<_>>().join(";")).unwrap_or_default();
        let provenance = r.provenance.map(|p| serde_json::to_value(p).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
        let source = if r.label_source == LabelSource::Human { "human" } else { "engine" };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.sample_id,
            csv_field(&r.image_path),
            csv_field(&r.keyword),
            csv_field(r.category.as_str()),
            source,
            csv_field(&traces),
            provenance.unwrap_or_default()
        );
    }
    out
}

struct Scored {
    statuses: BTreeMap<SampleId, SampleStatus>,
    predictions: BTreeMap<SampleId, ClassId>,
    truth: BTreeMap<SampleId, ClassId>,
    classes: Vec<ClassId>,
}

/// Committed coarse labels against the reference's clean, non-noise samples.
fn scored(project: &Project, reference: &EvalReference) -> Result<Scored> {
    let space = project.config().label_space()?;
    let samples = project.load_manifest()?;
    let statuses: BTreeMap<SampleId, SampleStatus> = samples.iter().map(|s| (s.id, s.status)).collect();
    let coarse = load_coarse(project)?;
    let predictions: BTreeMap<SampleId, ClassId> = coarse
        .values()
        .filter(|c| statuses.get(&c.sample_id) == Some(&SampleStatus::Committed))
        .map(|c| (c.sample_id, c.label.clone()))
        .collect();
    let truth: BTreeMap<SampleId, ClassId> = reference
        .truth
        .iter()
        .filter(|(id, class)| reference.clean_flags.get(id).copied().unwrap_or(!space.is_noise(class)))
        .filter(|(_, class)| !space.is_noise(class))
        .map(|(id, c)| (*id, c.clone()))
        .collect();
    let classes: Vec<ClassId> = space.class_ids().filter(|c| !space.is_noise(c)).cloned().collect();
    Ok(Scored { statuses, predictions, truth, classes })
}

/// Confusion over the same samples `evaluate` scores; uncommitted samples
/// land in the trailing `(none)` column.
pub fn confusion(project: &Project, reference: &EvalReference) -> Result<ConfusionMatrix> {
    let s = scored(project, reference)?;
    Ok(confusion_matrix(&s.predictions, &s.truth, &s.classes))
}

/// Score the project's current labels against a reference.
///
/// Classification covers the reference's clean samples over the non-noise
/// classes; a clean sample that was not committed counts as a miss.
pub fn evaluate(project: &Project, reference: &EvalReference, synonyms: &SynonymTable) -> Result<MetricsReport> {
    let Scored { statuses, predictions, truth, classes } = scored(project, reference)?;
    let classification = macro_prf(&predictions, &truth, Some(&classes));
    let retention = nrr_cdrr(&statuses, reference);
    let semantic = match &reference.semantic_truth {
        Some(sem_truth) => {
            let predicted: BTreeMap<SampleId, SemanticTruth> = load_semantic(project)?
                .into_values()
                .filter(|l| statuses.get(&l.sample_id) == Some(&SampleStatus::Committed))
                .map(|l| (l.sample_id, SemanticTruth { category: l.category, traces: l.traces }))
                .collect();
            Some(perfect_match(&predicted, sem_truth, synonyms))
        }
        None => None,
    };
    Ok(MetricsReport { classification, retention, semantic })
}
