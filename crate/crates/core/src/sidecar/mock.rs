//! Deterministic in-process sidecar for hermetic runs.
//!
//! Embeddings are a seeded hash of the input bytes mapped to a unit vector;
//! VLM answers come from an optional [`MockScript`] keyed by sample id, with
//! canned fallbacks otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::protocol::{
    BoxFlags, DescribeRequest, ExpandKeywordsRequest, GridProposal, KeywordChannel, Op, ProposeRequest,
    ProposeResponse, ValidateMode, ValidateRequest, ValidateResponse,
};
use super::{Embedder, SidecarError, SidecarResult, VlmClient};
use crate::error::{Error, Result};
use crate::model::{EmbeddingExpert, EmbeddingVector, SampleId, NO_TRACE};
use crate::rng::seeded_rng;

/// Canned VLM behaviour, loadable from JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockScript {
    /// Sample id (hex) → description.
    pub describe: BTreeMap<String, String>,
    /// Keyword lists per channel; when absent keywords are generated.
    pub keywords: BTreeMap<KeywordChannel, Vec<String>>,
    /// Sample id → proposer answer.
    pub propose: BTreeMap<String, ProposeResponse>,
    /// Sample id → whole-image validator answer.
    pub validate_global: BTreeMap<String, ValidateResponse>,
    /// Sample id → region validator answer.
    pub validate_local: BTreeMap<String, ValidateResponse>,
    /// Ops that fail as if the sidecar were down.
    pub fail_ops: BTreeSet<Op>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockSidecar {
    script: MockScript,
}

impl MockSidecar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_script(script: MockScript) -> Self {
        MockSidecar { script }
    }

    pub fn script_mut(&mut self) -> &mut MockScript {
        &mut self.script
    }

    fn check(&self, op: Op) -> SidecarResult<()> {
        if self.script.fail_ops.contains(&op) {
            return Err(SidecarError::Unreachable { op, message: "mock sidecar configured to fail".into() });
        }
        Ok(())
    }
}

/// Unit vector derived from `(expert, bytes)`; identical input always maps
/// to the identical vector on every platform.
pub fn hashed_unit_vector(expert: EmbeddingExpert, bytes: &[u8]) -> EmbeddingVector {
    let mut hasher = Sha256::new();
    hasher.update(expert.code().to_le_bytes());
    hasher.update(bytes);
    let digest = hasher.finalize();
    let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = seeded_rng(seed);
    let data: Vec<f32> = (0..expert.dim())
        .map(|_| (rng.next_u32() as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32)
        .collect();
    EmbeddingVector::normalized(expert, data).expect("hashed vector is finite and non-zero")
}

impl Embedder for MockSidecar {
    fn embed_image(&self, expert: EmbeddingExpert, image: &[u8]) -> SidecarResult<EmbeddingVector> {
        self.check(Op::EmbedImage)?;
        Ok(hashed_unit_vector(expert, image))
    }

    fn embed_text(&self, text: &str) -> SidecarResult<EmbeddingVector> {
        self.check(Op::EmbedText)?;
        Ok(hashed_unit_vector(EmbeddingExpert::ClipText, text.as_bytes()))
    }
}

impl VlmClient for MockSidecar {
    fn describe(&self, req: &DescribeRequest) -> SidecarResult<String> {
        self.check(Op::Describe)?;
        let id = SampleId::from_content(&req.image).to_hex();
        Ok(self
            .script
            .describe
            .get(&id)
            .cloned()
            .unwrap_or_else(|| format!("mock description of image {}", &id[..8])))
    }

    fn expand_keywords(&self, req: &ExpandKeywordsRequest) -> SidecarResult<Vec<String>> {
        self.check(Op::ExpandKeywords)?;
        if let Some(list) = self.script.keywords.get(&req.channel) {
            return Ok(list.clone());
        }
        let channel = match req.channel {
            KeywordChannel::Visual => "visual",
            KeywordChannel::Text => "text",
        };
        Ok((0..req.count).map(|i| format!("{} {channel} {i}", req.category)).collect())
    }

    fn propose(&self, req: &ProposeRequest) -> SidecarResult<ProposeResponse> {
        self.check(Op::Propose)?;
        let id = SampleId::from_content(&req.image).to_hex();
        if let Some(resp) = self.script.propose.get(&id) {
            return Ok(resp.clone());
        }
        // Whole image is the subject, nothing flagged.
        let grids = req
            .grids
            .iter()
            .map(|g| GridProposal {
                granularity: g.granularity,
                subject: (0..g.boxes.len()).collect(),
                flags: (0..g.boxes.len())
                    .map(|index| BoxFlags { index, traces: vec![NO_TRACE.to_string()] })
                    .collect(),
            })
            .collect();
        Ok(ProposeResponse { grids })
    }

    fn validate(&self, req: &ValidateRequest) -> SidecarResult<ValidateResponse> {
        self.check(Op::Validate)?;
        let id = SampleId::from_content(&req.image).to_hex();
        let table = match req.mode {
            ValidateMode::Global => &self.script.validate_global,
            ValidateMode::Local => &self.script.validate_local,
        };
        Ok(table.get(&id).cloned().unwrap_or_else(|| ValidateResponse {
            category: req.category_hint.clone(),
            traces: vec![NO_TRACE.to_string()],
        }))
    }

    fn revise_prompt(&self, prompt: &str, feedback: &str) -> SidecarResult<String> {
        self.check(Op::RevisePrompt)?;
        Ok(format!("{prompt}\n\n{feedback}"))
    }
}
