//! Command-line surface of the curation engine and the review API served to
//! the annotation UI.

pub mod review;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cornercase_core::acquisition::{
    expand_keywords, DirectoryFetcher, ExpandRequest, IdentityLexicon, Ingestor, Lexicon, SeedImage, TableLexicon,
};
use cornercase_core::config::PipelineConfig;
use cornercase_core::io::write_json_pretty;
use cornercase_core::metrics::{EvalReference, SynonymTable};
use cornercase_core::model::{latest_annotations, ClassId, RoundState, Stage};
use cornercase_core::pipeline::{
    confusion, connect, dataset_rows, evaluate, pending_escalations, pending_relabel, pending_triage, rows_to_csv,
    run_round, submit, RunOptions, RunOutcome, Submission,
};
use cornercase_core::project::Project;
use cornercase_core::simulate::{oracle_submissions, seed_submission, synthetic_config};
use cornercase_core::synth::{Oracle, SyntheticWorld, WorldParams};

#[derive(Debug, Parser)]
#[command(name = "cornercase", version, about = "Curate corner-case image datasets from noisy web crawls")]
pub struct Cli {
    /// Project directory.
    #[arg(long, global = true, default_value = ".")]
    pub project: PathBuf,
    /// Machine-readable output; errors go to stderr as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the project layout and a default configuration.
    Init {
        dir: PathBuf,
        /// Start from this configuration file instead of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Add crawled images from `<source>/<keyword>/*.{jpg,png,webp}`.
    Ingest {
        source: PathBuf,
        #[arg(long, default_value = "en")]
        lang: String,
    },
    /// Build the multilingual keyword corpus for one class.
    ExpandKeywords { class: String },
    /// Run a pipeline round.
    #[command(subcommand)]
    Round(RoundCommand),
    /// Inspect or export the human review queues.
    #[command(subcommand)]
    Escalations(EscalationsCommand),
    /// Ingest a resolution file written by the review UI.
    Resolve { file: PathBuf },
    /// Score the current labels against a reference.
    Metrics {
        /// Reference labels JSON (truth, clean flags, optional semantic truth).
        #[arg(long)]
        reference: PathBuf,
        /// Synonym TSV; overrides the configured table.
        #[arg(long)]
        synonyms: Option<PathBuf>,
        /// Also write the class confusion matrix as CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Write the curated dataset.
    Export {
        #[arg(long, value_enum)]
        format: ExportFormat,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the review API on localhost.
    ServeReview {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Synthetic worlds and their oracle, for walkthroughs.
    #[command(subcommand, hide = true)]
    Synth(SynthCommand),
}

#[derive(Debug, Subcommand)]
pub enum RoundCommand {
    /// Run (or resume) one round of a stage.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Proceed despite unresolved human input.
    #[arg(long)]
    pub force: bool,
    /// Make this the stage's last round.
    #[arg(long)]
    pub finalize: bool,
    /// Stop after the named step; the round stays resumable.
    #[arg(long)]
    pub stop_after: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Filter,
    Distill,
    Relabel,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Filter => Stage::Filter,
            StageArg::Distill => Stage::Distill,
            StageArg::Relabel => Stage::Relabel,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum EscalationsCommand {
    /// Print items awaiting a human decision.
    List {
        #[arg(long, value_enum, default_value_t = QueueArg::All)]
        queue: QueueArg,
    },
    /// Write every open queue to one JSON file.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QueueArg {
    All,
    Triage,
    Escalations,
    Relabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write a synthetic world: config.toml, crawl/, seeds.json, reference.json.
    World {
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Write the oracle's answers to every open queue as resolution files.
    Answer {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Print the error the way `--json` asks for and pick the exit code.
pub fn report_error(err: &anyhow::Error, json: bool) -> i32 {
    let kind = err.downcast_ref::<cornercase_core::Error>().map_or("internal", |e| e.kind());
    if json {
        let body = serde_json::json!({ "error": { "kind": kind, "message": format!("{err:#}") } });
        eprintln!("{body}");
    } else {
        eprintln!("error: {err:#}");
    }
    1
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let out = Output { json: cli.json };
    match cli.command {
        Command::Init { dir, config } => init(&out, &dir, config.as_deref()),
        Command::Ingest { source, lang } => ingest(&out, &cli.project, &source, &lang),
        Command::ExpandKeywords { class } => expand(&out, &cli.project, &class),
        Command::Round(RoundCommand::Run(args)) => round(&out, &cli.project, &args),
        Command::Escalations(EscalationsCommand::List { queue }) => list(&out, &cli.project, queue),
        Command::Escalations(EscalationsCommand::Export { out: path }) => {
            let project = Project::open(&cli.project)?;
            write_json_pretty(&path, &queues(&project, QueueArg::All)?.0)?;
            out.line(&format!("wrote {}", path.display()))
        }
        Command::Resolve { file } => resolve(&out, &cli.project, &file),
        Command::Metrics { reference, synonyms, confusion } => {
            metrics(&out, &cli.project, &reference, synonyms.as_deref(), confusion.as_deref())
        }
        Command::Export { format, out: path } => export(&cli.project, format, path.as_deref()),
        Command::ServeReview { port, host } => serve(&cli.project, &host, port),
        Command::Synth(SynthCommand::World { out: dir, seed, classes, per_class, noise }) => {
            let mut p = WorldParams { seed, ..WorldParams::default() };
            p.n_classes = classes.unwrap_or(p.n_classes);
            p.per_class = per_class.unwrap_or(p.per_class);
            p.noise_fraction = noise.unwrap_or(p.noise_fraction);
            synth_world(&out, &dir, &p)
        }
        Command::Synth(SynthCommand::Answer { out: dir }) => synth_answer(&out, &cli.project, &dir),
    }
}

struct Output {
    json: bool,
}

impl Output {
    /// `value` as JSON, or `text` for humans.
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> anyhow::Result<()> {
        let mut stdout = std::io::stdout().lock();
        if self.json {
            serde_json::to_writer(&mut stdout, value)?;
            writeln!(stdout)?;
        } else {
            write!(stdout, "{}", text())?;
        }
        Ok(())
    }

    fn line(&self, text: &str) -> anyhow::Result<()> {
        self.emit(&serde_json::json!({ "message": text }), || format!("{text}\n"))
    }
}

fn init(out: &Output, dir: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let cfg = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Project::init(dir, &cfg)?;
    out.line(&format!("initialized {}", dir.display()))
}

fn ingest(out: &Output, root: &Path, source: &Path, lang: &str) -> anyhow::Result<()> {
    let project = Project::open(root)?;
    let _lock = project.lock()?;
    let results = DirectoryFetcher::new(source, lang).fetch_all()?;
    let ingestor = Ingestor::new(project.ingest_sink()?);
    let report = ingestor.ingest_crawl(&results)?;
    ingestor.into_inner().finish()?;
    out.emit(&report, || {
        format!("added {}, duplicate {}, rejected {}\n", report.added, report.duplicate, report.rejected)
    })
}

fn expand(out: &Output, root: &Path, class: &str) -> anyhow::Result<()> {
    let project = Project::open(root)?;
    let cfg = project.config();
    let space = cfg.label_space()?;
    let category = ClassId::new(class);
    space.require(&category)?;
    let def = space.def(&category).ok_or_else(|| anyhow!("unknown class {class}"))?;
    let prompt = if def.description.is_empty() { def.name.clone() } else { format!("{}: {}", def.name, def.description) };

    let annotations = project.load_annotations()?;
    let latest = latest_annotations(&annotations)?;
    let samples = project.load_manifest()?;
    let seeds = samples
        .iter()
        .filter(|s| latest.get(&s.id).is_some_and(|a| a.label == category))
        .map(|s| Ok(SeedImage { id: s.id, bytes: project.read_image(s)? }))
        .collect::<cornercase_core::Result<Vec<_>>>()?;

    let lexicon: Box<dyn Lexicon> = match &cfg.project.lexicon {
        Some(rel) => Box::new(TableLexicon::load(&project.path(rel))?),
        None => Box::new(IdentityLexicon),
    };
    let sidecar = connect(cfg)?;
    let req = ExpandRequest {
        category: category.clone(),
        seeds: &seeds,
        prompt: &prompt,
        langs: &cfg.project.langs,
        keywords_per_channel: cfg.project.keywords_per_channel,
    };
    let corpus = expand_keywords(&req, sidecar.as_ref(), lexicon.as_ref())?;
    let dir = project.path("keywords");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json_pretty(&dir.join(format!("{class}.json")), &corpus)?;
    out.emit(&corpus, || corpus.entries.iter().map(|e| format!("{}\t{}\n", e.lang, e.text)).collect())
}

fn round(out: &Output, root: &Path, args: &RunArgs) -> anyhow::Result<()> {
    let project = Project::open(root)?;
    let sidecar = connect(project.config())?;
    let opts = RunOptions { force: args.force, finalize: args.finalize, stop_after: args.stop_after.clone() };
    match run_round(&project, sidecar.as_ref(), args.stage.into(), &opts)? {
        RunOutcome::Completed(state) => {
            for w in &state.warnings {
                log::warn!("{w}");
            }
            out.emit(&state, || round_text(&state))
        }
        RunOutcome::Stopped { round, step } => {
            let value = serde_json::json!({ "round": round, "stopped_after": step });
            out.emit(&value, || format!("round {round} stopped after {step}\n"))
        }
    }
}

fn round_text(s: &RoundState) -> String {
    let mut text = format!(
        "round {} ({}): pool {}, accepted {}, escalated {}{}\n",
        s.round,
        s.stage,
        s.pool,
        s.accepted,
        s.escalated,
        if s.finalized { ", stage finalized" } else { "" }
    );
    for w in &s.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    text
}

fn list(out: &Output, root: &Path, queue: QueueArg) -> anyhow::Result<()> {
    let (value, text) = queues(&Project::open(root)?, queue)?;
    out.emit(&value, || text)
}

/// Queue items keyed by queue name, plus a tab-separated text rendering.
fn queues(project: &Project, queue: QueueArg) -> anyhow::Result<(serde_json::Map<String, serde_json::Value>, String)> {
    let mut value = serde_json::Map::new();
    let mut text = String::new();
    if matches!(queue, QueueArg::All | QueueArg::Triage) {
        let pending = pending_triage(project)?;
        for p in &pending {
            for r in &p.requests {
                text.push_str(&format!("triage\t{}\t{}\tcluster {}\n", p.round, r.sample_id, r.cluster_id));
            }
        }
        value.insert("triage".into(), serde_json::to_value(pending)?);
    }
    if matches!(queue, QueueArg::All | QueueArg::Escalations) {
        let pending = pending_escalations(project)?;
        for p in &pending {
            let state = if p.resolved { "resolved" } else { "open" };
            text.push_str(&format!("escalation\t{}\t{}\t{:?}\t{state}\n", p.round, p.item.sample_id, p.item.reason));
        }
        value.insert("escalations".into(), serde_json::to_value(pending)?);
    }
    if matches!(queue, QueueArg::All | QueueArg::Relabel) {
        let pending = pending_relabel(project)?;
        for p in &pending {
            let state = if p.resolved { "resolved" } else { "open" };
            text.push_str(&format!("relabel\t{}\t{}\t{state}\n", p.round, p.item.sample_id));
        }
        value.insert("relabel".into(), serde_json::to_value(pending)?);
    }
    Ok((value, text))
}

/// A resolution file holds one submission or an array of them.
fn read_submissions(file: &Path) -> anyhow::Result<Vec<Submission>> {
    let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| cornercase_core::Error::json(file.display().to_string(), e))?;
    let parsed = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value),
        _ => serde_json::from_value(value).map(|s| vec![s]),
    };
    Ok(parsed.map_err(|e| cornercase_core::Error::json(file.display().to_string(), e))?)
}

fn resolve(out: &Output, root: &Path, file: &Path) -> anyhow::Result<()> {
    let project = Project::open(root)?;
    let mut accepted = 0;
    for s in read_submissions(file)? {
        accepted += submit(&project, &s)?.accepted;
    }
    out.emit(&serde_json::json!({ "accepted": accepted }), || format!("accepted {accepted}\n"))
}

fn metrics(
    out: &Output,
    root: &Path,
    reference: &Path,
    synonyms: Option<&Path>,
    confusion_csv: Option<&Path>,
) -> anyhow::Result<()> {
    let project = Project::open(root)?;
    let reference = EvalReference::load(reference)?;
    let table = match (synonyms, &project.config().metrics.synonyms) {
        (Some(p), _) => SynonymTable::load(p)?,
        (None, Some(rel)) => SynonymTable::load(&project.path(rel))?,
        (None, None) => SynonymTable::default(),
    };
    let report = evaluate(&project, &reference, &table)?;
    if let Some(path) = confusion_csv {
        cornercase_core::io::write_atomic(path, confusion(&project, &reference)?.to_csv().as_bytes())?;
    }
    out.emit(&report, || report.to_table())
}

fn export(root: &Path, format: ExportFormat, path: Option<&Path>) -> anyhow::Result<()> {
    let project = Project::open(root)?;
    let rows = dataset_rows(&project)?;
    let body = match format {
        ExportFormat::Jsonl => String::from_utf8(cornercase_core::io::to_jsonl(&rows)?)?,
        ExportFormat::Csv => rows_to_csv(&rows),
    };
    match path {
        Some(p) => Ok(cornercase_core::io::write_atomic(p, body.as_bytes())?),
        None => Ok(std::io::stdout().lock().write_all(body.as_bytes())?),
    }
}

fn serve(root: &Path, host: &str, port: u16) -> anyhow::Result<()> {
    // Fail early on a directory that is not a project.
    Project::open(root)?;
    let router = review::router(root.to_path_buf());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        log::info!("review API listening on {}", listener.local_addr()?);
        axum::serve(listener, router).await?;
        Ok(())
    })
}

fn synth_world(out: &Output, dir: &Path, params: &WorldParams) -> anyhow::Result<()> {
    let world = SyntheticWorld::generate(params)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let config = dir.join("config.toml");
    cornercase_core::io::write_atomic(&config, synthetic_config(&world).to_toml()?.as_bytes())?;
    world.write_fetch_tree(&dir.join("crawl"))?;
    write_json_pretty(&dir.join("seeds.json"), &seed_submission(&world))?;
    write_json_pretty(&dir.join("reference.json"), &world.reference())?;
    out.line(&format!("wrote synthetic world {} to {}", params.seed, dir.display()))
}

fn synth_answer(out: &Output, root: &Path, dir: &Path) -> anyhow::Result<()> {
    let project = Project::open(root)?;
    let params = WorldParams::from_endpoint(&project.config().project.sidecar_endpoint)?;
    let oracle = Oracle::new(Arc::new(SyntheticWorld::generate(&params)?));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (i, s) in oracle_submissions(&project, &oracle)?.iter().enumerate() {
        let path = dir.join(format!("answer-{i:03}.json"));
        write_json_pretty(&path, s)?;
        written.push(path.display().to_string());
    }
    out.emit(&written, || written.iter().map(|p| format!("{p}\n")).collect())
}
