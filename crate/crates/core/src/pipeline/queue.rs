//! Human-facing queue files and the submission path shared by the review
//! API and `resolve`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;

use serde::{Deserialize, Serialize};

use crate::distill::{EscalationItem, EscalationStatus};
use crate::error::{Error, Result};
use crate::io::{append_jsonl, read_json, read_jsonl_or_empty};
use crate::model::{AnnotationReason, AnnotationRecord, ClassId, SampleId, Stage, NO_TRACE};
use crate::project::Project;
use crate::revlm::RelabelReviewItem;

pub const TRIAGE_REQUESTS: &str = "triage_requests.jsonl";
pub const TRIAGE_LABELS: &str = "triage_labels.jsonl";
pub const TRIAGE_RESULT: &str = "triage.json";
pub const CLUSTERS: &str = "clusters.json";
pub const ESCALATIONS: &str = "escalations.jsonl";
pub const RESOLUTIONS: &str = "resolutions.jsonl";
pub const RELABEL_REVIEW: &str = "relabel_review.jsonl";
pub const RELABEL_RESOLUTIONS: &str = "relabel_resolutions.jsonl";
pub const STATE: &str = "state.json";
const QUEUE_LOCK: &str = ".queue.lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageRequest {
    pub sample_id: SampleId,
    pub cluster_id: i64,
    pub image_path: String,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageLabel {
    pub sample_id: SampleId,
    pub relevance: u8,
    pub annotator: String,
}

/// A class label from a human, for seeds and escalations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub sample_id: SampleId,
    pub label: ClassId,
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelabelResolution {
    pub sample_id: SampleId,
    pub category: ClassId,
    /// Replaces the fused trace set when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces: Option<BTreeSet<String>>,
    pub annotator: String,
}

/// Relabel review entry as stored in the queue file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewQueueItem {
    #[serde(flatten)]
    pub item: RelabelReviewItem,
    pub status: EscalationStatus,
    #[serde(default)]
    pub resolution: Option<ClassId>,
}

/// One batch of human decisions. This is the body of `POST /resolutions`
/// and the file format read by `resolve`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Submission {
    Seed { items: Vec<Resolution> },
    Triage { round: u32, items: Vec<TriageLabel> },
    Escalation { round: u32, items: Vec<Resolution> },
    Relabel { round: u32, items: Vec<RelabelResolution> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitReport {
    pub accepted: usize,
}

/// Serializes queue-file rewrites between the engine and review writers.
pub(crate) struct QueueLock {
    _file: File,
}

pub(crate) fn queue_lock(project: &Project) -> Result<QueueLock> {
    let path = project.path(QUEUE_LOCK);
    let file = File::options().create(true).truncate(false).write(true).open(&path).map_err(|e| Error::io(&path, e))?;
    file.lock().map_err(|e| Error::io(&path, e))?;
    Ok(QueueLock { _file: file })
}

fn stage_of(project: &Project, round: u32) -> Result<Stage> {
    project
        .load_pipeline_state()?
        .rounds
        .iter()
        .find(|r| r.round == round)
        .map(|r| r.stage)
        .ok_or_else(|| Error::Refused(format!("round {round} does not exist")))
}

fn expect_stage(project: &Project, round: u32, stage: Stage) -> Result<()> {
    let got = stage_of(project, round)?;
    if got != stage {
        return Err(Error::Refused(format!("round {round} is a {got} round, not {stage}")));
    }
    Ok(())
}

/// Last entry per sample wins.
pub fn last_by_sample<T: Clone>(items: &[T], id: impl Fn(&T) -> SampleId) -> BTreeMap<SampleId, T> {
    items.iter().map(|i| (id(i), i.clone())).collect()
}

/// Validate and record a batch. Everything is checked before anything is
/// written, so a rejected batch leaves no trace.
pub fn submit(project: &Project, submission: &Submission) -> Result<SubmitReport> {
    let space = project.config().label_space()?;
    let check_label = |id: &SampleId, label: &ClassId| {
        space.require(label).map(|_| ()).map_err(|_| Error::Refused(format!("sample {id}: unknown class {label}")))
    };
    let _guard = queue_lock(project)?;
    match submission {
        Submission::Seed { items } => {
            let known: BTreeSet<SampleId> = project.load_manifest()?.iter().map(|s| s.id).collect();
            for r in items {
                if !known.contains(&r.sample_id) {
                    return Err(Error::Refused(format!("sample {} is not in the manifest", r.sample_id)));
                }
                check_label(&r.sample_id, &r.label)?;
            }
            let records: Vec<AnnotationRecord> = last_by_sample(items, |r| r.sample_id)
                .into_values()
                .map(|r| AnnotationRecord { sample_id: r.sample_id, label: r.label, annotator: r.annotator, round: 0, reason: AnnotationReason::Seed })
                .collect();
            let added = project.add_annotations(&records)?;
            Ok(SubmitReport { accepted: added })
        }
        Submission::Triage { round, items } => {
            expect_stage(project, *round, Stage::Filter)?;
            if project.round_file(*round, TRIAGE_RESULT).exists() {
                return Err(Error::Refused(format!("triage of round {round} was already consumed")));
            }
            let requested: BTreeSet<SampleId> =
                read_jsonl_or_empty::<TriageRequest>(&project.round_file(*round, TRIAGE_REQUESTS))?.iter().map(|r| r.sample_id).collect();
            for l in items {
                if !requested.contains(&l.sample_id) {
                    return Err(Error::Refused(format!("sample {} was not requested for triage in round {round}", l.sample_id)));
                }
                if l.relevance > 1 {
                    return Err(Error::Refused(format!("sample {}: relevance must be 0 or 1", l.sample_id)));
                }
            }
            append_jsonl(&project.round_file(*round, TRIAGE_LABELS), items)?;
            Ok(SubmitReport { accepted: items.len() })
        }
        Submission::Escalation { round, items } => {
            expect_stage(project, *round, Stage::Distill)?;
            let queue: Vec<EscalationItem> = read_jsonl_or_empty(&project.round_file(*round, ESCALATIONS))?;
            let pending: BTreeSet<SampleId> =
                queue.iter().filter(|e| e.status == EscalationStatus::Pending).map(|e| e.sample_id).collect();
            for r in items {
                if !pending.contains(&r.sample_id) {
                    return Err(Error::Refused(format!("sample {} has no pending escalation in round {round}", r.sample_id)));
                }
                check_label(&r.sample_id, &r.label)?;
            }
            append_jsonl(&project.round_file(*round, RESOLUTIONS), items)?;
            Ok(SubmitReport { accepted: items.len() })
        }
        Submission::Relabel { round, items } => {
            expect_stage(project, *round, Stage::Relabel)?;
            let queue: Vec<ReviewQueueItem> = read_jsonl_or_empty(&project.round_file(*round, RELABEL_REVIEW))?;
            let pending: BTreeSet<SampleId> =
                queue.iter().filter(|e| e.status == EscalationStatus::Pending).map(|e| e.item.sample_id).collect();
            let positive: BTreeSet<&String> = space.positive_traces().collect();
            for r in items {
                if !pending.contains(&r.sample_id) {
                    return Err(Error::Refused(format!("sample {} has no pending relabel review in round {round}", r.sample_id)));
                }
                check_label(&r.sample_id, &r.category)?;
                if let Some(t) = &r.traces {
                    if let Some(bad) = t.iter().find(|t| !positive.contains(t) && t.as_str() != NO_TRACE) {
                        return Err(Error::Refused(format!("sample {}: unknown trace {bad:?}", r.sample_id)));
                    }
                }
            }
            append_jsonl(&project.round_file(*round, RELABEL_RESOLUTIONS), items)?;
            Ok(SubmitReport { accepted: items.len() })
        }
    }
}

/// Triage requests of a round whose labels have not been consumed yet,
/// minus the ids that already have a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingTriage {
    pub round: u32,
    pub requests: Vec<TriageRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingEscalation {
    pub round: u32,
    pub item: EscalationItem,
    pub image_path: String,
    /// A resolution has been submitted but not consumed yet.
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRelabel {
    pub round: u32,
    pub item: RelabelReviewItem,
    pub resolved: bool,
}

pub fn pending_triage(project: &Project) -> Result<Vec<PendingTriage>> {
    let state = project.load_pipeline_state()?;
    let mut out = Vec::new();
    for round in state.rounds_of(Stage::Filter) {
        if project.round_file(round, TRIAGE_RESULT).exists() {
            continue;
        }
        let requests: Vec<TriageRequest> = read_jsonl_or_empty(&project.round_file(round, TRIAGE_REQUESTS))?;
        if requests.is_empty() {
            continue;
        }
        let labeled: BTreeSet<SampleId> =
            read_jsonl_or_empty::<TriageLabel>(&project.round_file(round, TRIAGE_LABELS))?.iter().map(|l| l.sample_id).collect();
        let open: Vec<TriageRequest> = requests.into_iter().filter(|r| !labeled.contains(&r.sample_id)).collect();
        out.push(PendingTriage { round, requests: open });
    }
    Ok(out)
}

pub fn pending_escalations(project: &Project) -> Result<Vec<PendingEscalation>> {
    let state = project.load_pipeline_state()?;
    let paths: BTreeMap<SampleId, String> = project.load_manifest()?.into_iter().map(|s| (s.id, s.image_path)).collect();
    let mut out = Vec::new();
    for round in state.rounds_of(Stage::Distill) {
        let queue: Vec<EscalationItem> = read_jsonl_or_empty(&project.round_file(round, ESCALATIONS))?;
        let resolved: BTreeSet<SampleId> =
            read_jsonl_or_empty::<Resolution>(&project.round_file(round, RESOLUTIONS))?.iter().map(|r| r.sample_id).collect();
        for item in queue.into_iter().filter(|e| e.status == EscalationStatus::Pending) {
            out.push(PendingEscalation {
                round,
                image_path: paths.get(&item.sample_id).cloned().unwrap_or_default(),
                resolved: resolved.contains(&item.sample_id),
                item,
            });
        }
    }
    Ok(out)
}

pub fn pending_relabel(project: &Project) -> Result<Vec<PendingRelabel>> {
    let state = project.load_pipeline_state()?;
    let mut out = Vec::new();
    for round in state.rounds_of(Stage::Relabel) {
        let queue: Vec<ReviewQueueItem> = read_jsonl_or_empty(&project.round_file(round, RELABEL_REVIEW))?;
        let resolved: BTreeSet<SampleId> = read_jsonl_or_empty::<RelabelResolution>(&project.round_file(round, RELABEL_RESOLUTIONS))?
            .iter()
            .map(|r| r.sample_id)
            .collect();
        for q in queue.into_iter().filter(|q| q.status == EscalationStatus::Pending) {
            out.push(PendingRelabel { round, resolved: resolved.contains(&q.item.sample_id), item: q.item });
        }
    }
    Ok(out)
}

/// Human input the next round would need, by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outstanding {
    pub triage: usize,
    pub escalations: usize,
    pub relabel: usize,
}

impl Outstanding {
    pub fn is_empty(&self) -> bool {
        self.triage + self.escalations + self.relabel == 0
    }
}

pub fn outstanding(project: &Project) -> Result<Outstanding> {
    Ok(Outstanding {
        triage: pending_triage(project)?.iter().map(|p| p.requests.len()).sum(),
        escalations: pending_escalations(project)?.iter().filter(|p| !p.resolved).count(),
        relabel: pending_relabel(project)?.iter().filter(|p| !p.resolved).count(),
    })
}

/// The latest `state.json` of every finished round.
pub fn round_states(project: &Project) -> Result<Vec<crate::model::RoundState>> {
    let mut out = Vec::new();
    for r in project.load_pipeline_state()?.rounds {
        let p = project.round_file(r.round, STATE);
        if p.exists() {
            out.push(read_json(&p)?);
        }
    }
    Ok(out)
}
