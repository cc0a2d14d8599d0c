//! Distill-stage steps: embed, predict, plan escalations, apply.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{upsert_coarse, CoarseLabel, LabelSource};
use super::filter::ensure_image_embeddings;
use super::queue::ESCALATIONS;
use super::{closes_stage, RoundCtx, Summary};
use crate::distill::{
    boundary_candidates, build_index, expert_query, predict as predict_sample, sample_low_fas, EscalationItem, EscalationReason,
    LowFasCandidate, Outcome,
};
use crate::error::Result;
use crate::io::{read_json, read_jsonl, read_jsonl_or_empty, write_json_pretty, write_jsonl};
use crate::model::{latest_annotations, ClassId, Sample, SampleId, SampleStatus};
use crate::rng::derive_seed;

pub const PREDICTIONS: &str = "predictions.jsonl";
pub const PLAN: &str = "plan.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: SampleId,
    pub label: ClassId,
    pub conflict: bool,
    pub topic_conf: f64,
    pub label_conf: f64,
    pub outcome: Outcome,
    /// Per-expert predicted class, in expert order.
    pub expert_labels: Vec<ClassId>,
    /// Alignment against every class, in label-space order.
    pub fas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub finalize: bool,
    pub pool: usize,
    pub accepted: usize,
    pub conflicts: usize,
    pub low_fas: usize,
    pub boundary: usize,
    /// Escalations dropped by the per-round budget.
    pub over_budget: usize,
}

pub(crate) fn embed(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let annotations = ctx.project.load_annotations()?;
    let annotated: BTreeSet<SampleId> = annotations.iter().map(|a| a.sample_id).collect();
    let samples = ctx.project.load_manifest()?;
    let needed: Vec<&Sample> =
        samples.iter().filter(|s| s.status == SampleStatus::Refined || annotated.contains(&s.id)).collect();
    ensure_image_embeddings(ctx.project, ctx.sidecar, &needed)
}

pub(crate) fn predict(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let project = ctx.project;
    let space = project.config().label_space()?;
    let params = project.config().vote_params();
    let annotations = project.load_annotations()?;
    let latest = latest_annotations(&annotations)?;
    let stores = project.load_embeddings()?;
    let experts = stores.experts();
    let index = build_index(&annotations, &experts, &space)?;
    let pool: Vec<SampleId> = project
        .load_manifest()?
        .into_iter()
        .filter(|s| s.status == SampleStatus::Refined && !latest.contains_key(&s.id))
        .map(|s| s.id)
        .collect();
    let records = pool
        .par_iter()
        .map(|id| {
            let query = expert_query(&experts, id)?;
            let p = predict_sample(*id, &query, &index, &params)?;
            Ok(PredictionRecord {
                sample_id: *id,
                label: p.decision.label,
                conflict: p.decision.conflict,
                topic_conf: p.decision.topic_conf,
                label_conf: p.decision.label_conf,
                outcome: p.decision.outcome,
                expert_labels: p.verdicts.into_iter().map(|v| v.predicted).collect(),
                fas: p.fas,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&ctx.file(PREDICTIONS), &records)
}

pub(crate) fn plan(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let cfg = ctx.project.config();
    let d = &cfg.distill;
    let space = cfg.label_space()?;
    let preds: Vec<PredictionRecord> = read_jsonl(&ctx.file(PREDICTIONS))?;
    let accepted = preds.iter().filter(|p| p.outcome == Outcome::Accepted).count();
    let finalize = closes_stage(ctx, accepted as u64, preds.len() as u64)?;
    let mut plan = PlanRecord { finalize, pool: preds.len(), accepted, conflicts: 0, low_fas: 0, boundary: 0, over_budget: 0 };
    let mut items: Vec<EscalationItem> = Vec::new();
    if !finalize {
        items.extend(
            preds
                .iter()
                .filter(|p| p.conflict)
                .map(|p| EscalationItem::pending(p.sample_id, EscalationReason::Conflict, Some(p.label.clone()), p.label_conf, ctx.round)),
        );
        let low: Vec<LowFasCandidate> = preds
            .iter()
            .filter(|p| p.outcome == Outcome::Accepted && !p.conflict)
            .map(|p| LowFasCandidate { sample_id: p.sample_id, class: p.label.clone(), fas: p.label_conf })
            .collect();
        let low_items = sample_low_fas(&low, d.alpha, d.k_l, derive_seed(ctx.seed, "low-fas"), ctx.round)?;
        let non_targets: Vec<(SampleId, Vec<f64>)> = preds
            .iter()
            .filter(|p| p.outcome == Outcome::NonTarget && !p.conflict)
            .map(|p| (p.sample_id, p.fas.clone()))
            .collect();
        let boundary_items = boundary_candidates(&non_targets, d.k_h, &space, ctx.round)?;
        plan.conflicts = items.len();
        plan.low_fas = low_items.len();
        plan.boundary = boundary_items.len();
        items.extend(low_items);
        items.extend(boundary_items);
        if let Some(b) = d.escalation_budget {
            let cap = (b * preds.len() as f64 + 1e-9).floor() as usize;
            if items.len() > cap {
                plan.over_budget = items.len() - cap;
                ctx.warn(format!("escalation budget keeps {cap} of {} candidates", items.len()));
                items.truncate(cap);
            }
        }
    }
    write_jsonl(&ctx.file(ESCALATIONS), &items)?;
    write_json_pretty(&ctx.file(PLAN), &plan)
}

pub(crate) fn apply(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let project = ctx.project;
    let space = project.config().label_space()?;
    let plan: PlanRecord = read_json(&ctx.file(PLAN))?;
    let escalations: Vec<EscalationItem> = read_jsonl_or_empty(&ctx.file(ESCALATIONS))?;
    let escalated: BTreeSet<SampleId> = escalations.iter().map(|e| e.sample_id).collect();
    let mut samples = project.load_manifest()?;
    for s in samples.iter_mut().filter(|s| escalated.contains(&s.id) && s.status == SampleStatus::Refined) {
        s.transition(SampleStatus::Escalated)?;
    }
    let mut coarse = Vec::new();
    if plan.finalize {
        let preds: Vec<PredictionRecord> = read_jsonl(&ctx.file(PREDICTIONS))?;
        let by_id: std::collections::BTreeMap<SampleId, &PredictionRecord> = preds.iter().map(|p| (p.sample_id, p)).collect();
        let annotations = project.load_annotations()?;
        let latest = latest_annotations(&annotations)?;
        for s in samples.iter_mut().filter(|s| s.status == SampleStatus::Refined) {
            if let Some(a) = latest.get(&s.id) {
                let keep = !space.is_noise(&a.label);
                s.transition(if keep { SampleStatus::Committed } else { SampleStatus::Discarded })?;
                if keep {
                    coarse.push(CoarseLabel {
                        sample_id: s.id,
                        label: a.label.clone(),
                        topic_conf: None,
                        label_conf: None,
                        round: a.round,
                        source: LabelSource::Human,
                    });
                }
            } else if let Some(p) = by_id.get(&s.id) {
                let keep = p.outcome == Outcome::Accepted && !space.is_noise(&p.label);
                s.transition(if keep { SampleStatus::Committed } else { SampleStatus::Discarded })?;
                if keep {
                    coarse.push(CoarseLabel {
                        sample_id: s.id,
                        label: p.label.clone(),
                        topic_conf: Some(p.topic_conf),
                        label_conf: Some(p.label_conf),
                        round: ctx.round,
                        source: LabelSource::Engine,
                    });
                }
            }
        }
    }
    // Labels first: a replay after a crash only revisits samples still refined.
    if !coarse.is_empty() {
        upsert_coarse(project, coarse)?;
    }
    project.save_manifest(&samples)
}

pub(crate) fn summary(ctx: &RoundCtx<'_>) -> Result<Summary> {
    let plan: PlanRecord = read_json(&ctx.file(PLAN))?;
    let escalations: Vec<EscalationItem> = read_jsonl_or_empty(&ctx.file(ESCALATIONS))?;
    Ok(Summary {
        pool: plan.pool as u64,
        accepted: plan.accepted as u64,
        escalated: escalations.len() as u64,
        finalized: plan.finalize,
    })
}
