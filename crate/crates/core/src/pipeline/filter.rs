//! Filter-stage steps: describe, embed, score and cluster, apply.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::queue::{TriageRequest, CLUSTERS, TRIAGE_REQUESTS};
use super::{closes_stage, RoundCtx, Summary};
use crate::error::{Error, Result};
use crate::filter::{
    build_enhanced_embedding, cluster, sample_for_triage, score_trimodal, split_by_threshold, TrimodalInputs, TrimodalScore,
    OUTLIER,
};
use crate::io::{read_json, read_jsonl, write_json_pretty, write_jsonl};
use crate::model::{EmbeddingExpert, EmbeddingVector, Sample, SampleId, SampleStatus};
use crate::project::{keyword_key, Project};
use crate::rng::derive_seed;
use crate::sidecar::{DescribeRequest, Sidecar};

pub const SCORES: &str = "scores.jsonl";

/// Clusters of a filter round, with what is needed to redraw the triage sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub seed: u64,
    pub n_per: usize,
    /// Non-outlier clusters only.
    pub clusters: BTreeMap<i64, Vec<SampleId>>,
    pub outliers: Vec<SampleId>,
    #[serde(default)]
    pub warning: Option<String>,
}

pub(crate) fn load_clusters(project: &Project, round: u32) -> Result<ClusterRecord> {
    read_json(&project.round_file(round, CLUSTERS))
}

fn raw_samples(project: &Project) -> Result<Vec<Sample>> {
    Ok(project.load_manifest()?.into_iter().filter(|s| s.status == SampleStatus::Raw).collect())
}

/// Keep what succeeded, then report the first failure.
fn first_error<T>(results: Vec<(SampleId, Result<T>)>) -> (Vec<(SampleId, T)>, Option<Error>) {
    let mut ok = Vec::with_capacity(results.len());
    let mut err = None;
    for (id, r) in results {
        match r {
            Ok(v) => ok.push((id, v)),
            Err(e) if err.is_none() => err = Some(e),
            Err(e) => log::warn!("sample {id}: {e}"),
        }
    }
    (ok, err)
}

pub(crate) fn describe(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let project = ctx.project;
    let prompt = project.prompt()?;
    let mut samples = project.load_manifest()?;
    let todo: Vec<&Sample> = samples.iter().filter(|s| s.status == SampleStatus::Raw && s.description.is_none()).collect();
    let sidecar = ctx.sidecar;
    let results: Vec<(SampleId, Result<String>)> = todo
        .par_iter()
        .map(|s| {
            let r = project.read_image(s).and_then(|image| {
                sidecar.describe(&DescribeRequest { image, prompt: prompt.clone() }).map_err(Error::from)
            });
            (s.id, r)
        })
        .collect();
    let (ok, err) = first_error(results);
    let described: BTreeMap<SampleId, String> = ok.into_iter().collect();
    if !described.is_empty() {
        for s in samples.iter_mut() {
            if let Some(d) = described.get(&s.id) {
                s.description = Some(d.clone());
            }
        }
        project.save_manifest(&samples)?;
    }
    err.map_or(Ok(()), Err)
}

const IMAGE_EXPERTS: [EmbeddingExpert; 3] = [EmbeddingExpert::ClipImage, EmbeddingExpert::Dinov2, EmbeddingExpert::Beit];

/// Compute and store every missing image embedding of `samples`.
pub(crate) fn ensure_image_embeddings(project: &Project, sidecar: &dyn Sidecar, samples: &[&Sample]) -> Result<()> {
    let mut stores = project.load_embeddings()?;
    let todo: Vec<(&Sample, Vec<EmbeddingExpert>)> = samples
        .iter()
        .map(|s| (*s, IMAGE_EXPERTS.into_iter().filter(|&e| !stores.image_store(e).contains_key(&s.id)).collect::<Vec<_>>()))
        .filter(|(_, missing)| !missing.is_empty())
        .collect();
    if todo.is_empty() {
        return Ok(());
    }
    let results: Vec<(SampleId, Result<Vec<EmbeddingVector>>)> = todo
        .par_iter()
        .map(|(s, missing)| {
            let r = project.read_image(s).and_then(|image| {
                missing.iter().map(|&e| sidecar.embed_image(e, &image).map_err(Error::from)).collect::<Result<Vec<_>>>()
            });
            (s.id, r)
        })
        .collect();
    let (ok, err) = first_error(results);
    for (id, vectors) in ok {
        for v in vectors {
            stores.image_store_mut(v.expert()).insert(id, v);
        }
    }
    project.save_embeddings(&stores)?;
    err.map_or(Ok(()), Err)
}

pub(crate) fn embed(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let project = ctx.project;
    let raw = raw_samples(project)?;
    let refs: Vec<&Sample> = raw.iter().collect();
    ensure_image_embeddings(project, ctx.sidecar, &refs)?;

    let mut stores = project.load_embeddings()?;
    let mut texts: BTreeMap<String, Vec<SampleId>> = BTreeMap::new();
    for s in &raw {
        if let Some(d) = &s.description {
            if !stores.clip_text.contains_key(&s.id) {
                texts.entry(d.clone()).or_default().push(s.id);
            }
        }
    }
    let keywords: BTreeSet<&str> =
        raw.iter().map(|s| s.keyword.as_str()).filter(|k| !stores.keywords.contains_key(&keyword_key(k))).collect();
    let sidecar = ctx.sidecar;
    let text_results: Vec<(String, Result<EmbeddingVector>)> =
        texts.keys().cloned().collect::<Vec<_>>().into_par_iter().map(|t| {
            let r = sidecar.embed_text(&t).map_err(Error::from);
            (t, r)
        }).collect();
    let keyword_results: Vec<(&str, Result<EmbeddingVector>)> =
        keywords.into_par_iter().map(|k| (k, sidecar.embed_text(k).map_err(Error::from))).collect();
    let mut err = None;
    for (t, r) in text_results {
        match r {
            Ok(v) => {
                for id in &texts[&t] {
                    stores.clip_text.insert(*id, v.clone());
                }
            }
            Err(e) => err = err.or(Some(e)),
        }
    }
    for (k, r) in keyword_results {
        match r {
            Ok(v) => {
                stores.keywords.insert(keyword_key(k), v);
            }
            Err(e) => err = err.or(Some(e)),
        }
    }
    project.save_embeddings(&stores)?;
    err.map_or(Ok(()), Err)
}

pub(crate) fn score(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let project = ctx.project;
    let cfg = project.config();
    let raw = raw_samples(project)?;
    let stores = project.load_embeddings()?;
    let missing = |id: &SampleId, what: &str| Error::MissingEmbedding { sample: *id, expert: what.into() };
    let mut scores: Vec<TrimodalScore> = Vec::with_capacity(raw.len());
    for s in &raw {
        let image = stores.clip_image.get(&s.id).ok_or_else(|| missing(&s.id, "clip_image"))?;
        let keyword = stores.keywords.get(&keyword_key(&s.keyword)).ok_or_else(|| missing(&s.id, "keyword clip_text"))?;
        let inputs = TrimodalInputs { image, description: stores.clip_text.get(&s.id), keyword };
        scores.push(score_trimodal(s, inputs, &cfg.filter.weights)?);
    }
    let (high, _) = split_by_threshold(&scores, cfg.filter.tau_mm);
    let enhanced = raw
        .iter()
        .filter(|s| high.contains(&s.id))
        .map(|s| build_enhanced_embedding(s, &stores.clip_image[&s.id], &stores.clip_text[&s.id]))
        .collect::<Result<Vec<_>>>()?;
    let (mut groups, warning) = cluster(&enhanced, &cfg.hdbscan());
    if let Some(w) = &warning {
        ctx.warn(format!("clustering: {w}"));
    }
    let outliers = groups.remove(&OUTLIER).unwrap_or_default();
    let seed = derive_seed(ctx.seed, "triage");
    let record = ClusterRecord { seed, n_per: cfg.filter.n_per, clusters: groups, outliers, warning };
    let round = ctx.round;
    let paths: BTreeMap<SampleId, &str> = raw.iter().map(|s| (s.id, s.image_path.as_str())).collect();
    let requests: Vec<TriageRequest> = sample_for_triage(&record.clusters, record.n_per, seed)
        .into_iter()
        .flat_map(|(cid, ids)| {
            let paths = &paths;
            ids.into_iter().map(move |id| TriageRequest { sample_id: id, cluster_id: cid, image_path: paths[&id].to_string(), round })
        })
        .collect();
    write_jsonl(&ctx.file(SCORES), &scores)?;
    write_json_pretty(&ctx.file(CLUSTERS), &record)?;
    write_jsonl(&ctx.file(TRIAGE_REQUESTS), &requests)
}

pub(crate) fn apply(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let scores: Vec<TrimodalScore> = read_jsonl(&ctx.file(SCORES))?;
    let (high, low) = split_by_threshold(&scores, ctx.project.config().filter.tau_mm);
    let mut samples = ctx.project.load_manifest()?;
    for s in samples.iter_mut().filter(|s| s.status == SampleStatus::Raw) {
        if high.contains(&s.id) {
            s.transition(SampleStatus::Refined)?;
        } else if low.contains(&s.id) {
            s.transition(SampleStatus::LowSim)?;
        }
    }
    ctx.project.save_manifest(&samples)
}

pub(crate) fn summary(ctx: &RoundCtx<'_>) -> Result<Summary> {
    let scores: Vec<TrimodalScore> = read_jsonl(&ctx.file(SCORES))?;
    let (high, _) = split_by_threshold(&scores, ctx.project.config().filter.tau_mm);
    let requests: Vec<TriageRequest> = read_jsonl(&ctx.file(TRIAGE_REQUESTS))?;
    let (pool, accepted) = (scores.len() as u64, high.len() as u64);
    Ok(Summary { pool, accepted, escalated: requests.len() as u64, finalized: closes_stage(ctx, accepted, pool)? })
}
