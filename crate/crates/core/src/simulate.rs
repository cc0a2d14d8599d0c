//! Scripted end-to-end sessions: a synthetic world is crawled into a fresh
//! project and every human decision is answered by the ground-truth oracle.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acquisition::{DirectoryFetcher, Ingestor};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, SynonymTable};
use crate::model::{RoundState, Stage};
use crate::pipeline::{
    evaluate, pending_escalations, pending_relabel, pending_triage, run_round, submit, RelabelResolution, Resolution,
    RunOptions, RunOutcome, Submission, TriageLabel,
};
use crate::project::Project;
use crate::synth::{Oracle, SyntheticSidecar, SyntheticWorld, WorldParams};

pub const ORACLE: &str = "oracle";

/// Endpoint string that regenerates the same world.
pub fn synthetic_endpoint(p: &WorldParams) -> String {
    format!(
        "synthetic://{}?classes={}&per_class={}&noise={}&spread={}&jitter={}",
        p.seed, p.n_classes, p.per_class, p.noise_fraction, p.spread, p.jitter
    )
}

/// Default configuration with the world's label space and endpoint.
pub fn synthetic_config(world: &SyntheticWorld) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.project.sidecar_endpoint = synthetic_endpoint(&world.params);
    cfg.project.rng_seed = world.params.seed;
    cfg.labels.classes = world.space.classes().to_vec();
    cfg.labels.noise_class = world.space.noise_class().clone();
    cfg.labels.traces = world.space.traces().to_vec();
    cfg
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOptions {
    /// Distill rounds that escalate before the finalizing round.
    pub escalation_rounds: u32,
    pub relabel: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions { escalation_rounds: 2, relabel: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub rounds: Vec<RoundState>,
    pub metrics: MetricsReport,
}

impl SessionReport {
    pub fn stage_rounds(&self, stage: Stage) -> impl Iterator<Item = &RoundState> {
        self.rounds.iter().filter(move |r| r.stage == stage)
    }

    /// Largest share of the pool escalated in any distill round.
    pub fn max_escalation_fraction(&self) -> f64 {
        self.stage_rounds(Stage::Distill)
            .filter(|r| r.pool > 0)
            .map(|r| r.escalated as f64 / r.pool as f64)
            .fold(0.0, f64::max)
    }
}

fn completed(outcome: RunOutcome) -> Result<RoundState> {
    match outcome {
        RunOutcome::Completed(s) => Ok(s),
        RunOutcome::Stopped { round, step } => Err(Error::Precondition(format!("round {round} stopped after {step}"))),
    }
}

/// Crawl the world into `root`, which must not be an initialized project.
pub fn ingest_world(root: &Path, world: &SyntheticWorld) -> Result<Project> {
    let project = Project::init(root, &synthetic_config(world))?;
    let crawl = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    world.write_fetch_tree(crawl.path())?;
    let results = DirectoryFetcher::new(crawl.path(), "en").fetch_all()?;
    let ingestor = Ingestor::new(project.ingest_sink()?);
    ingestor.ingest_crawl(&results)?;
    ingestor.into_inner().finish()?;
    submit(&project, &seed_submission(world))?;
    Ok(project)
}

/// Seed submission covering the world's seed annotations.
pub fn seed_submission(world: &SyntheticWorld) -> Submission {
    let items = world
        .seed_annotations()
        .into_iter()
        .map(|a| Resolution { sample_id: a.sample_id, label: a.label, annotator: ORACLE.into() })
        .collect();
    Submission::Seed { items }
}

fn oracle_class(oracle: &Oracle, id: &crate::model::SampleId) -> Result<crate::model::ClassId> {
    oracle.class_of(id).cloned().ok_or_else(|| Error::Data(format!("oracle does not know {id}")))
}

/// Oracle answers to every open triage request, escalation and relabel
/// review, one submission per queue and round.
pub fn oracle_submissions(project: &Project, oracle: &Oracle) -> Result<Vec<Submission>> {
    let mut out = Vec::new();
    for p in pending_triage(project)? {
        let items: Vec<TriageLabel> = p
            .requests
            .iter()
            .map(|r| TriageLabel { sample_id: r.sample_id, relevance: oracle.relevance(&r.sample_id), annotator: ORACLE.into() })
            .collect();
        if !items.is_empty() {
            out.push(Submission::Triage { round: p.round, items });
        }
    }
    let mut by_round: BTreeMap<u32, Vec<Resolution>> = BTreeMap::new();
    for p in pending_escalations(project)?.into_iter().filter(|p| !p.resolved) {
        let label = oracle_class(oracle, &p.item.sample_id)?;
        by_round.entry(p.round).or_default().push(Resolution { sample_id: p.item.sample_id, label, annotator: ORACLE.into() });
    }
    out.extend(by_round.into_iter().map(|(round, items)| Submission::Escalation { round, items }));
    let mut by_round: BTreeMap<u32, Vec<RelabelResolution>> = BTreeMap::new();
    for p in pending_relabel(project)?.into_iter().filter(|p| !p.resolved) {
        let category = oracle_class(oracle, &p.item.sample_id)?;
        by_round.entry(p.round).or_default().push(RelabelResolution {
            sample_id: p.item.sample_id,
            category,
            traces: None,
            annotator: ORACLE.into(),
        });
    }
    out.extend(by_round.into_iter().map(|(round, items)| Submission::Relabel { round, items }));
    Ok(out)
}

/// Submit the oracle's answer to everything pending.
pub fn answer_pending(project: &Project, oracle: &Oracle) -> Result<()> {
    for s in oracle_submissions(project, oracle)? {
        submit(project, &s)?;
    }
    Ok(())
}

/// Filter once, distill `escalation_rounds + 1` times, optionally relabel,
/// then score against the world's reference.
pub fn run_session(root: &Path, params: &WorldParams, opts: &SessionOptions) -> Result<SessionReport> {
    let world = Arc::new(SyntheticWorld::generate(params)?);
    let project = ingest_world(root, &world)?;
    let sidecar = SyntheticSidecar::new(world.clone());
    let oracle = Oracle::new(world.clone());
    let mut rounds = Vec::new();
    let plain = RunOptions::default();

    rounds.push(completed(run_round(&project, &sidecar, Stage::Filter, &plain)?)?);
    answer_pending(&project, &oracle)?;
    for _ in 0..opts.escalation_rounds {
        rounds.push(completed(run_round(&project, &sidecar, Stage::Distill, &plain)?)?);
        answer_pending(&project, &oracle)?;
    }
    let last = RunOptions { finalize: true, ..RunOptions::default() };
    rounds.push(completed(run_round(&project, &sidecar, Stage::Distill, &last)?)?);
    if opts.relabel {
        rounds.push(completed(run_round(&project, &sidecar, Stage::Relabel, &plain)?)?);
        answer_pending(&project, &oracle)?;
    }
    let metrics = evaluate(&project, &world.reference(), &SynonymTable::default())?;
    Ok(SessionReport { rounds, metrics })
}
