//! Round driver.
//!
//! A round runs one stage as a fixed list of steps. Each finished step is
//! appended to `rounds/<n>/steps.jsonl` together with the config hash it ran
//! under, and every step persists its outputs before it is recorded, so a
//! crashed round resumes at the first unrecorded step. `state.json` is
//! written last and marks the round complete.
//!
//! Every round first consumes whatever human input has arrived since the
//! previous one: triage labels, escalation resolutions and relabel reviews.

mod consume;
mod dataset;
mod distill;
mod filter;
pub mod queue;
mod relabel;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use dataset::{
    confusion, dataset_rows, evaluate, load_coarse, load_semantic, rows_to_csv, CoarseLabel, DatasetRow, LabelSource, COARSE_LABELS,
    SEMANTIC_LABELS,
};
pub use distill::{PlanRecord, PredictionRecord, PLAN, PREDICTIONS};
pub use consume::TriageResult;
pub use filter::{ClusterRecord, SCORES};
pub use queue::{
    outstanding, pending_escalations, pending_relabel, pending_triage, round_states, submit, Outstanding, PendingEscalation,
    PendingRelabel, PendingTriage, RelabelResolution, Resolution, ReviewQueueItem, Submission, SubmitReport, TriageLabel,
    TriageRequest,
};
pub use relabel::{RelabelFailure, PROPOSALS, RELABEL_FAILED, ROUND_SEMANTIC};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::io::{append_jsonl, read_json, read_jsonl_or_empty, write_json_pretty, write_jsonl};
use crate::model::{RoundState, Stage};
use crate::project::{PipelineState, Project, RoundRecord};
use crate::rng::derive_seed;
use crate::sidecar::http::{HttpSidecar, RetryPolicy};
use crate::sidecar::mock::{MockScript, MockSidecar};
use crate::sidecar::{SharedSidecar, Sidecar};
use crate::synth::{SyntheticSidecar, SyntheticWorld, WorldParams};

pub const STEPS: &str = "steps.jsonl";

/// Build the sidecar named by `project.sidecar_endpoint`: `http(s)://...`,
/// `mock://[script.json]` or `synthetic://<seed>[?...]`.
pub fn connect(config: &PipelineConfig) -> Result<SharedSidecar> {
    let endpoint = config.project.sidecar_endpoint.trim();
    if let Some(rest) = endpoint.strip_prefix("mock://") {
        let sidecar = if rest.is_empty() {
            MockSidecar::new()
        } else {
            MockSidecar::with_script(MockScript::load(std::path::Path::new(rest))?)
        };
        return Ok(Arc::new(sidecar));
    }
    if endpoint.starts_with("synthetic://") {
        let world = SyntheticWorld::generate(&WorldParams::from_endpoint(endpoint)?)?;
        return Ok(Arc::new(SyntheticSidecar::new(Arc::new(world))));
    }
    if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        let retry = RetryPolicy { max_attempts: config.project.sidecar_retries.max(1), ..RetryPolicy::default() };
        return Ok(Arc::new(HttpSidecar::new(endpoint, Duration::from_secs(config.project.sidecar_timeout_secs), retry)));
    }
    Err(Error::Config(format!("unsupported sidecar endpoint {endpoint:?}")))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Start a new round even though human input is still outstanding.
    pub force: bool,
    /// Make this the stage's last round.
    pub finalize: bool,
    /// Return right after this step is recorded, leaving the round open.
    pub stop_after: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed(RoundState),
    Stopped { round: u32, step: String },
}

impl RunOutcome {
    pub fn state(&self) -> Option<&RoundState> {
        match self {
            RunOutcome::Completed(s) => Some(s),
            RunOutcome::Stopped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: String,
    pub config_hash: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Steps whose outputs stay valid when the configuration changes.
const CACHE_STEPS: [&str; 3] = ["consume", "describe", "embed"];

pub fn steps_of(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Filter => &["consume", "describe", "embed", "score", "apply", "state"],
        Stage::Distill => &["consume", "embed", "predict", "plan", "apply", "state"],
        Stage::Relabel => &["consume", "relabel", "apply", "state"],
    }
}

pub(crate) struct RoundCtx<'a> {
    pub project: &'a Project,
    pub sidecar: &'a dyn Sidecar,
    pub round: u32,
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: u64,
    pub opts: &'a RunOptions,
    pub warnings: Vec<String>,
}

impl RoundCtx<'_> {
    pub fn file(&self, name: &str) -> std::path::PathBuf {
        self.project.round_file(self.round, name)
    }

    pub fn warn(&mut self, message: String) {
        log::warn!("round {}: {message}", self.round);
        self.warnings.push(message);
    }
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

fn check_new_round(project: &Project, state: &PipelineState, stage: Stage, opts: &RunOptions) -> Result<()> {
    let cfg = project.config();
    if state.finalized.contains(&stage) {
        return Err(Error::Refused(format!("the {stage} stage is finalized")));
    }
    let limit = match stage {
        Stage::Filter => Some(cfg.filter.max_rounds),
        Stage::Distill => Some(cfg.distill.max_rounds),
        Stage::Relabel => None,
    };
    if let Some(limit) = limit {
        if state.rounds_of(stage).count() as u32 >= limit {
            return Err(Error::Refused(format!("the {stage} stage has used all {limit} rounds")));
        }
    }
    match stage {
        Stage::Distill if project.load_annotations()?.is_empty() => {
            return Err(Error::Precondition("index empty: seed annotations required".into()));
        }
        Stage::Relabel if !state.finalized.contains(&Stage::Distill) => {
            return Err(Error::Refused("relabeling needs a finalized distill stage".into()));
        }
        _ => {}
    }
    let o = outstanding(project)?;
    if !o.is_empty() && !opts.force {
        return Err(Error::Refused(format!(
            "human input outstanding: {} triage labels, {} escalations, {} relabel reviews; resolve them or pass --force",
            o.triage, o.escalations, o.relabel
        )));
    }
    Ok(())
}

/// Run, or resume, one round of `stage`.
pub fn run_round(project: &Project, sidecar: &dyn Sidecar, stage: Stage, opts: &RunOptions) -> Result<RunOutcome> {
    let _lock = project.lock()?;
    let config_hash = project.config().hash()?;
    let mut pstate = project.load_pipeline_state()?;
    let round = match pstate.rounds.last() {
        Some(last) if !project.round_file(last.round, queue::STATE).exists() => {
            if last.stage != stage {
                return Err(Error::Refused(format!(
                    "round {} ({}) is unfinished; run the {} stage again to complete it",
                    last.round, last.stage, last.stage
                )));
            }
            log::info!("resuming round {}", last.round);
            last.round
        }
        _ => {
            check_new_round(project, &pstate, stage, opts)?;
            let round = pstate.last_round() + 1;
            let dir = project.round_dir(round);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            pstate.rounds.push(RoundRecord { round, stage });
            project.save_pipeline_state(&pstate)?;
            round
        }
    };

    let ledger = project.round_file(round, STEPS);
    let mut done: Vec<StepRecord> = read_jsonl_or_empty(&ledger)?;
    let stale = done.iter().any(|s| s.config_hash != hex(config_hash));
    if stale && !done.iter().any(|s| s.step == "apply") {
        log::warn!("configuration changed since round {round} started; recomputing its derived steps");
        done.retain(|s| CACHE_STEPS.contains(&s.step.as_str()));
        write_jsonl(&ledger, &done)?;
    }

    let mut ctx = RoundCtx {
        project,
        sidecar,
        round,
        stage,
        seed: derive_seed(project.config().project.rng_seed, &format!("round-{round}")),
        config_hash,
        opts,
        warnings: done.iter().flat_map(|s| s.warnings.clone()).collect(),
    };
    for &step in steps_of(stage) {
        if done.iter().any(|s| s.step == step) {
            continue;
        }
        let before = ctx.warnings.len();
        log::info!("round {round} ({stage}): {step}");
        match (stage, step) {
            (_, "consume") => consume::consume(&mut ctx)?,
            (Stage::Filter, "describe") => filter::describe(&mut ctx)?,
            (Stage::Filter, "embed") => filter::embed(&mut ctx)?,
            (Stage::Filter, "score") => filter::score(&mut ctx)?,
            (Stage::Filter, "apply") => filter::apply(&mut ctx)?,
            (Stage::Distill, "embed") => distill::embed(&mut ctx)?,
            (Stage::Distill, "predict") => distill::predict(&mut ctx)?,
            (Stage::Distill, "plan") => distill::plan(&mut ctx)?,
            (Stage::Distill, "apply") => distill::apply(&mut ctx)?,
            (Stage::Relabel, "relabel") => relabel::relabel(&mut ctx)?,
            (Stage::Relabel, "apply") => relabel::apply(&mut ctx)?,
            (_, "state") => write_state(&mut ctx)?,
            _ => unreachable!("unknown step {step}"),
        }
        let record = StepRecord { step: step.to_string(), config_hash: hex(config_hash), warnings: ctx.warnings[before..].to_vec() };
        append_jsonl(&ledger, &[record])?;
        if step != "state" && opts.stop_after.as_deref() == Some(step) {
            return Ok(RunOutcome::Stopped { round, step: step.to_string() });
        }
    }
    Ok(RunOutcome::Completed(read_json(&project.round_file(round, queue::STATE))?))
}

/// Pool, accepted and escalated counts of a round, plus whether the stage
/// ends with it.
pub(crate) struct Summary {
    pub pool: u64,
    pub accepted: u64,
    pub escalated: u64,
    pub finalized: bool,
}

/// True when `|Δaccepted| / pool` stayed below `eps` over the last two
/// transitions, counting the current round.
pub(crate) fn plateaued(history: &[(u64, u64)], current: (u64, u64), eps: f64) -> bool {
    if eps <= 0.0 || history.len() < 2 {
        return false;
    }
    let mut seq: Vec<(u64, u64)> = history[history.len() - 2..].to_vec();
    seq.push(current);
    seq.windows(2).all(|w| {
        let (prev, (acc, pool)) = (w[0].0, w[1]);
        pool > 0 && (acc as f64 - prev as f64).abs() / (pool as f64) < eps
    })
}

/// `(accepted, pool)` of the earlier completed rounds of the context's stage.
pub(crate) fn stage_history(ctx: &RoundCtx<'_>) -> Result<Vec<(u64, u64)>> {
    Ok(round_states(ctx.project)?
        .into_iter()
        .filter(|s| s.stage == ctx.stage && s.round < ctx.round)
        .map(|s| (s.accepted, s.pool))
        .collect())
}

/// Whether the current round closes its stage: asked for, out of rounds, or plateaued.
pub(crate) fn closes_stage(ctx: &RoundCtx<'_>, accepted: u64, pool: u64) -> Result<bool> {
    let cfg = ctx.project.config();
    let limit = match ctx.stage {
        Stage::Filter => cfg.filter.max_rounds,
        Stage::Distill => cfg.distill.max_rounds,
        Stage::Relabel => u32::MAX,
    };
    let history = stage_history(ctx)?;
    Ok(ctx.opts.finalize || history.len() as u32 + 1 >= limit || plateaued(&history, (accepted, pool), cfg.rounds.plateau_epsilon))
}

fn write_state(ctx: &mut RoundCtx<'_>) -> Result<()> {
    let summary = match ctx.stage {
        Stage::Filter => filter::summary(ctx)?,
        Stage::Distill => distill::summary(ctx)?,
        Stage::Relabel => relabel::summary(ctx)?,
    };
    let samples = ctx.project.load_manifest()?;
    let state = RoundState {
        round: ctx.round,
        stage: ctx.stage,
        counts: RoundState::count_statuses(&samples),
        config_hash: ctx.config_hash,
        rng_seed: ctx.seed,
        pool: summary.pool,
        accepted: summary.accepted,
        escalated: summary.escalated,
        finalized: summary.finalized,
        warnings: ctx.warnings.clone(),
    };
    let mut pstate = ctx.project.load_pipeline_state()?;
    if summary.finalized {
        pstate.finalized.insert(ctx.stage);
    }
    ctx.project.save_pipeline_state(&pstate)?;
    write_json_pretty(&ctx.file(queue::STATE), &state)
}
