//! Relabel-stage steps: region-evidence relabeling of committed samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{load_coarse, load_semantic, upsert_semantic};
use super::queue::{ReviewQueueItem, RELABEL_REVIEW};
use super::{closes_stage, RoundCtx, Summary};
use crate::acquisition::probe_image;
use crate::distill::EscalationStatus;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, read_jsonl_or_empty, write_jsonl};
use crate::model::{SampleId, SampleStatus};
use crate::revlm::{relabel_sample, RelabelInput, RelabelOutcome, SemanticLabel};
use crate::sidecar::ProposeResponse;

pub const ROUND_SEMANTIC: &str = "semantic.jsonl";
pub const PROPOSALS: &str = "proposals.jsonl";
pub const RELABEL_FAILED: &str = "relabel_failed.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelFailure {
    pub sample_id: SampleId,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProposalRecord {
    sample_id: SampleId,
    raw: ProposeResponse,
    notes: Vec<String>,
}

pub(crate) fn relabel(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let project = ctx.project;
    let space = project.config().label_space()?;
    let params = project.config().relabel_params();
    let coarse = load_coarse(project)?;
    let done = load_semantic(project)?;
    let samples = project.load_manifest()?;
    let todo: Vec<_> = samples
        .iter()
        .filter(|s| s.status == SampleStatus::Committed && !done.contains_key(&s.id))
        .filter_map(|s| coarse.get(&s.id).filter(|c| !space.is_noise(&c.label)).map(|c| (s, &c.label)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(project.config().relabel.max_in_flight)
        .build()
        .map_err(|e| Error::Config(format!("relabel worker pool: {e}")))?;
    let vlm = ctx.sidecar;
    let round = ctx.round;
    let results: Vec<(SampleId, Result<RelabelOutcome>)> = pool.install(|| {
        todo.par_iter()
            .map(|(s, label)| {
                let r = project.read_image(s).and_then(|image| {
                    let info = probe_image(&image).ok_or_else(|| Error::Data(format!("sample {}: undecodable image", s.id)))?;
                    let input = RelabelInput {
                        sample_id: s.id,
                        image_path: &s.image_path,
                        image: &image,
                        width: info.width,
                        height: info.height,
                        coarse: label,
                        round,
                    };
                    relabel_sample(&input, &space, &params, vlm)
                });
                (s.id, r)
            })
            .collect()
    });
    let mut labels: Vec<SemanticLabel> = Vec::new();
    let mut proposals = Vec::new();
    let mut review = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(o) => {
                proposals.push(ProposalRecord { sample_id: id, raw: o.raw_proposal, notes: o.proposal.notes });
                if let Some(item) = o.review {
                    review.push(ReviewQueueItem { item, status: EscalationStatus::Pending, resolution: None });
                }
                labels.push(o.label);
            }
            Err(e) => {
                ctx.warn(format!("relabel failed for {id}: {e}"));
                failed.push(RelabelFailure { sample_id: id, error: e.to_string() });
            }
        }
    }
    write_jsonl(&ctx.file(PROPOSALS), &proposals)?;
    write_jsonl(&ctx.file(RELABEL_FAILED), &failed)?;
    write_jsonl(&ctx.file(RELABEL_REVIEW), &review)?;
    write_jsonl(&ctx.file(ROUND_SEMANTIC), &labels)
}

pub(crate) fn apply(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let labels: Vec<SemanticLabel> = read_jsonl(&ctx.file(ROUND_SEMANTIC))?;
    upsert_semantic(ctx.project, labels)
}

pub(crate) fn summary(ctx: &RoundCtx<'_>) -> Result<Summary> {
    let labels: Vec<SemanticLabel> = read_jsonl(&ctx.file(ROUND_SEMANTIC))?;
    let failed: Vec<RelabelFailure> = read_jsonl_or_empty(&ctx.file(RELABEL_FAILED))?;
    let review: Vec<ReviewQueueItem> = read_jsonl_or_empty(&ctx.file(RELABEL_REVIEW))?;
    let (pool, accepted) = ((labels.len() + failed.len()) as u64, labels.len() as u64);
    Ok(Summary { pool, accepted, escalated: review.len() as u64, finalized: closes_stage(ctx, accepted, pool)? })
}
