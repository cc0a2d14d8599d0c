//! Fold submitted human input back into the project.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::{load_semantic, upsert_coarse, upsert_semantic, CoarseLabel, LabelSource};
use super::filter::load_clusters;
use super::queue::{
    last_by_sample, queue_lock, RelabelResolution, Resolution, ReviewQueueItem, TriageLabel, TriageRequest, ESCALATIONS,
    RELABEL_RESOLUTIONS, RELABEL_REVIEW, RESOLUTIONS, TRIAGE_LABELS, TRIAGE_REQUESTS, TRIAGE_RESULT,
};
use super::RoundCtx;
use crate::distill::{EscalationItem, EscalationReason, EscalationStatus};
use crate::error::Result;
use crate::filter::{build_prompt_feedback, triage_clusters, ClusterTriage, PromptFeedback, TriageBucket};
use crate::io::{read_jsonl_or_empty, write_json_pretty, write_jsonl};
use crate::model::{AnnotationReason, AnnotationRecord, SampleId, SampleStatus, Stage, NO_TRACE};

/// Outcome of a consumed triage, written as `triage.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageResult {
    pub clusters: Vec<ClusterTriage>,
    pub feedback: Option<PromptFeedback>,
}

pub(crate) fn consume(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let _guard = queue_lock(ctx.project)?;
    consume_triage(ctx)?;
    consume_escalations(ctx)?;
    consume_relabel(ctx)
}

fn consume_triage(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let project = ctx.project;
    let rounds: Vec<u32> = project.load_pipeline_state()?.rounds_of(Stage::Filter).collect();
    for round in rounds {
        if project.round_file(round, TRIAGE_RESULT).exists() {
            continue;
        }
        let requests: Vec<TriageRequest> = read_jsonl_or_empty(&project.round_file(round, TRIAGE_REQUESTS))?;
        if requests.is_empty() {
            continue;
        }
        let labels = last_by_sample(&read_jsonl_or_empty::<TriageLabel>(&project.round_file(round, TRIAGE_LABELS))?, |l| l.sample_id);
        let missing = requests.iter().filter(|r| !labels.contains_key(&r.sample_id)).count();
        if missing > 0 {
            ctx.warn(format!("triage of round {round} is incomplete ({missing} labels missing); left pending"));
            continue;
        }
        let relevance: BTreeMap<SampleId, u8> = labels.iter().map(|(id, l)| (*id, l.relevance)).collect();
        let record = load_clusters(project, round)?;
        let cfg = project.config();
        let triage = triage_clusters(&record.clusters, &relevance, record.n_per, record.seed, &cfg.triage_thresholds())?;

        let mut samples = project.load_manifest()?;
        let discard: std::collections::BTreeSet<SampleId> = triage
            .iter()
            .filter(|t| t.bucket == TriageBucket::Discard)
            .flat_map(|t| t.member_ids.iter().copied())
            .collect();
        for s in samples.iter_mut().filter(|s| discard.contains(&s.id) && s.status == SampleStatus::Refined) {
            s.transition(SampleStatus::Discarded)?;
        }
        let descriptions: BTreeMap<SampleId, String> =
            samples.iter().filter_map(|s| s.description.clone().map(|d| (s.id, d))).collect();
        let feedback = if triage.is_empty() {
            None
        } else {
            let current = project.prompt()?;
            let fb = build_prompt_feedback(&triage, &descriptions, cfg.filter.exemplars_per_bucket, &current, ctx.sidecar)?;
            if let Some(w) = &fb.warning {
                ctx.warn(format!("prompt feedback: {w}"));
            }
            Some(fb)
        };
        project.save_manifest(&samples)?;
        if let Some(fb) = &feedback {
            let mut pstate = project.load_pipeline_state()?;
            pstate.prompt = Some(fb.prompt.clone());
            project.save_pipeline_state(&pstate)?;
        }
        log::info!("consumed triage of round {round}: {} clusters, {} samples discarded", triage.len(), discard.len());
        write_json_pretty(&project.round_file(round, TRIAGE_RESULT), &TriageResult { clusters: triage, feedback })?;
    }
    Ok(())
}

fn annotation_reason(r: EscalationReason) -> AnnotationReason {
    match r {
        EscalationReason::Conflict => AnnotationReason::Conflict,
        EscalationReason::LowFas => AnnotationReason::LowFas,
        EscalationReason::Boundary => AnnotationReason::Boundary,
    }
}

fn consume_escalations(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let project = ctx.project;
    let space = project.config().label_space()?;
    let rounds: Vec<u32> = project.load_pipeline_state()?.rounds_of(Stage::Distill).collect();
    for round in rounds {
        let path = project.round_file(round, ESCALATIONS);
        let mut queue: Vec<EscalationItem> = read_jsonl_or_empty(&path)?;
        let resolutions = last_by_sample(&read_jsonl_or_empty::<Resolution>(&project.round_file(round, RESOLUTIONS))?, |r| r.sample_id);
        let mut annotations = Vec::new();
        let mut coarse = Vec::new();
        let mut outcome: BTreeMap<SampleId, SampleStatus> = BTreeMap::new();
        for item in queue.iter_mut().filter(|e| e.status == EscalationStatus::Pending) {
            let Some(res) = resolutions.get(&item.sample_id) else { continue };
            annotations.push(AnnotationRecord {
                sample_id: item.sample_id,
                label: res.label.clone(),
                annotator: res.annotator.clone(),
                round,
                reason: annotation_reason(item.reason),
            });
            if space.is_noise(&res.label) {
                outcome.insert(item.sample_id, SampleStatus::Discarded);
            } else {
                outcome.insert(item.sample_id, SampleStatus::Committed);
                coarse.push(CoarseLabel {
                    sample_id: item.sample_id,
                    label: res.label.clone(),
                    topic_conf: None,
                    label_conf: None,
                    round,
                    source: LabelSource::Human,
                });
            }
            item.status = EscalationStatus::Resolved;
            item.resolution = Some(res.label.clone());
        }
        if annotations.is_empty() {
            continue;
        }
        project.add_annotations(&annotations)?;
        upsert_coarse(project, coarse)?;
        let mut samples = project.load_manifest()?;
        for s in samples.iter_mut() {
            if let Some(&to) = outcome.get(&s.id) {
                if s.status.can_transition(to) {
                    s.transition(to)?;
                } else {
                    ctx.warn(format!("sample {} is {}; its resolution to {to} only updates the index", s.id, s.status));
                }
            }
        }
        project.save_manifest(&samples)?;
        write_jsonl(&path, &queue)?;
        log::info!("consumed {} escalation resolutions of round {round}", annotations.len());
    }
    Ok(())
}

fn consume_relabel(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let project = ctx.project;
    let rounds: Vec<u32> = project.load_pipeline_state()?.rounds_of(Stage::Relabel).collect();
    for round in rounds {
        let path = project.round_file(round, RELABEL_REVIEW);
        let mut queue: Vec<ReviewQueueItem> = read_jsonl_or_empty(&path)?;
        let resolutions = last_by_sample(
            &read_jsonl_or_empty::<RelabelResolution>(&project.round_file(round, RELABEL_RESOLUTIONS))?,
            |r| r.sample_id,
        );
        let semantic = load_semantic(project)?;
        let mut updated = Vec::new();
        for q in queue.iter_mut().filter(|q| q.status == EscalationStatus::Pending) {
            let Some(res) = resolutions.get(&q.item.sample_id) else { continue };
            let Some(mut label) = semantic.get(&q.item.sample_id).cloned() else {
                ctx.warn(format!("review of {} has no semantic label to update", q.item.sample_id));
                continue;
            };
            label.category = res.category.clone();
            if let Some(t) = &res.traces {
                label.traces = t.iter().filter(|t| t.as_str() != NO_TRACE).cloned().collect();
            }
            updated.push(label);
            q.status = EscalationStatus::Resolved;
            q.resolution = Some(res.category.clone());
        }
        if updated.is_empty() {
            continue;
        }
        let n = updated.len();
        upsert_semantic(project, updated)?;
        write_jsonl(&path, &queue)?;
        log::info!("consumed {n} relabel reviews of round {round}");
    }
    Ok(())
}
