//! On-disk project directory.
//!
//! ```text
//! config.toml
//! manifest.jsonl
//! annotations.jsonl
//! pipeline.json            rounds run so far, finalized stages, active prompt
//! images/<id>.<ext>
//! embeddings/<expert>.bin  clip_image, clip_text, dinov2, beit
//! embeddings/keywords.bin  clip_text vectors keyed by keyword hash
//! rounds/<n>/...           per-round queues, decisions and state.json
//! labels/coarse.jsonl
//! labels/semantic.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::IngestSink;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl_or_empty, write_atomic, write_json_pretty, write_jsonl};
use crate::model::container::{load_embeddings, write_embeddings};
use crate::model::manifest::{load_manifest, persist_manifest};
use crate::model::{AnnotationRecord, EmbeddingExpert, EmbeddingVector, Sample, SampleId, Stage};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const PIPELINE_FILE: &str = "pipeline.json";
pub const LOCK_FILE: &str = ".lock";
pub const KEYWORDS_STORE: &str = "keywords";

/// Key under which a keyword's text embedding is stored.
pub fn keyword_key(keyword: &str) -> SampleId {
    SampleId::from_content(keyword.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub stage: Stage,
}

/// Project-level progress, rewritten at the start and end of every round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineState {
    pub rounds: Vec<RoundRecord>,
    pub finalized: BTreeSet<Stage>,
    /// Description prompt after triage feedback; `None` uses the configured initial prompt.
    pub prompt: Option<String>,
}

impl PipelineState {
    pub fn last_round(&self) -> u32 {
        self.rounds.last().map_or(0, |r| r.round)
    }

    pub fn rounds_of(&self, stage: Stage) -> impl Iterator<Item = u32> + '_ {
        self.rounds.iter().filter(move |r| r.stage == stage).map(|r| r.round)
    }
}

/// Every embedding the engine keeps, keyed by sample id (keywords by
/// [`keyword_key`]).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStores {
    pub clip_image: BTreeMap<SampleId, EmbeddingVector>,
    pub clip_text: BTreeMap<SampleId, EmbeddingVector>,
    pub dinov2: BTreeMap<SampleId, EmbeddingVector>,
    pub beit: BTreeMap<SampleId, EmbeddingVector>,
    pub keywords: BTreeMap<SampleId, EmbeddingVector>,
}

impl EmbeddingStores {
    pub fn experts(&self) -> crate::distill::ExpertStores<'_> {
        [&self.clip_image, &self.dinov2, &self.beit]
    }

    pub fn image_store(&self, e: EmbeddingExpert) -> &BTreeMap<SampleId, EmbeddingVector> {
        match e {
            EmbeddingExpert::ClipImage => &self.clip_image,
            EmbeddingExpert::ClipText => &self.clip_text,
            EmbeddingExpert::Dinov2 => &self.dinov2,
            EmbeddingExpert::Beit => &self.beit,
        }
    }

    pub fn image_store_mut(&mut self, e: EmbeddingExpert) -> &mut BTreeMap<SampleId, EmbeddingVector> {
        match e {
            EmbeddingExpert::ClipImage => &mut self.clip_image,
            EmbeddingExpert::ClipText => &mut self.clip_text,
            EmbeddingExpert::Dinov2 => &mut self.dinov2,
            EmbeddingExpert::Beit => &mut self.beit,
        }
    }
}

/// Exclusive hold on a project; released on drop.
#[derive(Debug)]
pub struct ProjectLock {
    _file: File,
}

#[derive(Debug, Clone)]
pub struct Project {
    root: PathBuf,
    config: PipelineConfig,
}

impl Project {
    /// Create the directory layout and write `config`.
    pub fn init(root: &Path, config: &PipelineConfig) -> Result<Project> {
        config.validate()?;
        if root.join(CONFIG_FILE).exists() {
            return Err(Error::Project(format!("{} is already initialized", root.display())));
        }
        for dir in ["", "images", "embeddings", "rounds", "labels"] {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let project = Project { root: root.to_path_buf(), config: config.clone() };
        let _lock = project.lock()?;
        write_atomic(&root.join(CONFIG_FILE), config.to_toml()?.as_bytes())?;
        persist_manifest(&[], &project.manifest_path())?;
        write_atomic(&root.join(ANNOTATIONS_FILE), b"")?;
        project.save_pipeline_state(&PipelineState::default())?;
        Ok(project)
    }

    pub fn open(root: &Path) -> Result<Project> {
        let cfg = root.join(CONFIG_FILE);
        if !cfg.exists() {
            return Err(Error::Project(format!("{} is not an initialized project", root.display())));
        }
        Ok(Project { root: root.to_path_buf(), config: PipelineConfig::load(&cfg)? })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Replace the configuration on disk and in memory.
    pub fn set_config(&mut self, config: PipelineConfig) -> Result<()> {
        config.validate()?;
        write_atomic(&self.root.join(CONFIG_FILE), config.to_toml()?.as_bytes())?;
        self.config = config;
        Ok(())
    }

    /// Take the exclusive project lock without waiting.
    pub fn lock(&self) -> Result<ProjectLock> {
        let path = self.root.join(LOCK_FILE);
        let file = File::options().create(true).truncate(false).write(true).open(&path).map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(ProjectLock { _file: file }),
            Err(fs::TryLockError::WouldBlock) => {
                Err(Error::Project(format!("{} is locked by another process", self.root.display())))
            }
            Err(fs::TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn round_dir(&self, round: u32) -> PathBuf {
        self.root.join("rounds").join(round.to_string())
    }

    pub fn round_file(&self, round: u32, name: &str) -> PathBuf {
        self.round_dir(round).join(name)
    }

    pub fn labels_path(&self, name: &str) -> PathBuf {
        self.root.join("labels").join(name)
    }

    pub fn load_manifest(&self) -> Result<Vec<Sample>> {
        load_manifest(&self.manifest_path())
    }

    pub fn save_manifest(&self, samples: &[Sample]) -> Result<()> {
        persist_manifest(samples, &self.manifest_path())
    }

    pub fn load_annotations(&self) -> Result<Vec<AnnotationRecord>> {
        read_jsonl_or_empty(&self.root.join(ANNOTATIONS_FILE))
    }

    /// Append records whose `(sample_id, round)` is not already present, so
    /// a replayed step never duplicates annotations. Returns how many were added.
    pub fn add_annotations(&self, records: &[AnnotationRecord]) -> Result<usize> {
        let mut all = self.load_annotations()?;
        let mut seen: HashSet<(SampleId, u32)> = all.iter().map(|a| (a.sample_id, a.round)).collect();
        let before = all.len();
        for r in records {
            if seen.insert((r.sample_id, r.round)) {
                all.push(r.clone());
            }
        }
        if all.len() != before {
            write_jsonl(&self.root.join(ANNOTATIONS_FILE), &all)?;
        }
        Ok(all.len() - before)
    }

    pub fn load_pipeline_state(&self) -> Result<PipelineState> {
        let p = self.root.join(PIPELINE_FILE);
        if !p.exists() {
            return Ok(PipelineState::default());
        }
        read_json(&p)
    }

    pub fn save_pipeline_state(&self, state: &PipelineState) -> Result<()> {
        write_json_pretty(&self.root.join(PIPELINE_FILE), state)
    }

    /// Active description prompt.
    pub fn prompt(&self) -> Result<String> {
        Ok(self.load_pipeline_state()?.prompt.unwrap_or_else(|| self.config.project.initial_prompt.clone()))
    }

    fn store_path(&self, name: &str) -> PathBuf {
        self.root.join("embeddings").join(format!("{name}.bin"))
    }

    fn load_store(&self, name: &str) -> Result<BTreeMap<SampleId, EmbeddingVector>> {
        let p = self.store_path(name);
        if !p.exists() {
            return Ok(BTreeMap::new());
        }
        load_embeddings(&p)
    }

    pub fn load_embeddings(&self) -> Result<EmbeddingStores> {
        Ok(EmbeddingStores {
            clip_image: self.load_store(EmbeddingExpert::ClipImage.as_str())?,
            clip_text: self.load_store(EmbeddingExpert::ClipText.as_str())?,
            dinov2: self.load_store(EmbeddingExpert::Dinov2.as_str())?,
            beit: self.load_store(EmbeddingExpert::Beit.as_str())?,
            keywords: self.load_store(KEYWORDS_STORE)?,
        })
    }

    pub fn save_embeddings(&self, stores: &EmbeddingStores) -> Result<()> {
        for e in EmbeddingExpert::ALL {
            write_embeddings(&self.store_path(e.as_str()), e, stores.image_store(e))?;
        }
        write_embeddings(&self.store_path(KEYWORDS_STORE), EmbeddingExpert::ClipText, &stores.keywords)
    }

    /// Image bytes of a sample, resolved against the project root. Paths
    /// escaping the root are refused.
    pub fn read_image(&self, sample: &Sample) -> Result<Vec<u8>> {
        let rel = Path::new(&sample.image_path);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::Data(format!("sample {} has an image path outside the project", sample.id)));
        }
        let p = self.root.join(rel);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    }

    /// Sink that stores images under `images/` and collects new manifest
    /// rows; call [`ProjectSink::finish`] to persist.
    pub fn ingest_sink(&self) -> Result<ProjectSink> {
        let samples = self.load_manifest()?;
        let ids = samples.iter().map(|s| s.id).collect();
        Ok(ProjectSink { root: self.root.clone(), samples, ids })
    }
}

pub struct ProjectSink {
    root: PathBuf,
    samples: Vec<Sample>,
    ids: HashSet<SampleId>,
}

impl ProjectSink {
    pub fn finish(self) -> Result<Vec<Sample>> {
        persist_manifest(&self.samples, &self.root.join(MANIFEST_FILE))?;
        Ok(self.samples)
    }
}

impl IngestSink for ProjectSink {
    fn contains(&self, id: &SampleId) -> bool {
        self.ids.contains(id)
    }

    fn store_image(&mut self, id: &SampleId, extension: &str, bytes: &[u8]) -> Result<String> {
        let rel = format!("images/{id}.{extension}");
        write_atomic(&self.root.join(&rel), bytes)?;
        Ok(rel)
    }

    fn append(&mut self, sample: Sample) -> Result<()> {
        self.ids.insert(sample.id);
        self.samples.push(sample);
        Ok(())
    }
}
