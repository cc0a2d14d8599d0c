use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, EmbeddingExpert, EmbeddingVector, Sample, SampleId};

/// Weights of the three pairwise cosines in the fused score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionWeights {
    pub img_desc: f64,
    pub desc_kw: f64,
    pub img_kw: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { img_desc: 0.5, desc_kw: 0.3, img_kw: 0.2 }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.img_desc, self.desc_kw, self.img_kw];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("fusion weights must be finite and non-negative, got {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("fusion weights must sum to 1, got {sum}")));
        }
        Ok(())
    }

    pub fn fuse(&self, img_desc: f64, desc_kw: f64, img_kw: f64) -> f64 {
        self.img_desc * img_desc + self.desc_kw * desc_kw + self.img_kw * img_kw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimodalScore {
    pub sample_id: SampleId,
    pub sim_img_desc: f64,
    pub sim_desc_kw: f64,
    pub sim_img_kw: f64,
    pub fused: f64,
}

fn expect_expert(sample: &SampleId, what: &str, v: &EmbeddingVector, expert: EmbeddingExpert) -> Result<()> {
    if v.expert() != expert {
        return Err(Error::Precondition(format!(
            "sample {sample}: {what} embedding is {}, expected {expert}",
            v.expert()
        )));
    }
    Ok(())
}

/// Image, description and keyword embeddings of one sample.
#[derive(Debug, Clone, Copy)]
pub struct TrimodalInputs<'a> {
    pub image: &'a EmbeddingVector,
    pub description: Option<&'a EmbeddingVector>,
    pub keyword: &'a EmbeddingVector,
}

pub fn score_trimodal(sample: &Sample, inputs: TrimodalInputs<'_>, weights: &FusionWeights) -> Result<TrimodalScore> {
    weights.validate()?;
    let id = sample.id;
    if sample.description.is_none() {
        return Err(Error::Precondition(format!("sample {id} has no description")));
    }
    let desc = inputs
        .description
        .ok_or_else(|| Error::Precondition(format!("sample {id} has no description embedding")))?;
    expect_expert(&id, "image", inputs.image, EmbeddingExpert::ClipImage)?;
    expect_expert(&id, "description", desc, EmbeddingExpert::ClipText)?;
    expect_expert(&id, "keyword", inputs.keyword, EmbeddingExpert::ClipText)?;
    let sim_img_desc = inputs.image.cosine(desc);
    let sim_desc_kw = desc.cosine(inputs.keyword);
    let sim_img_kw = inputs.image.cosine(inputs.keyword);
    let fused = weights.fuse(sim_img_desc, sim_desc_kw, sim_img_kw);
    if !fused.is_finite() {
        return Err(Error::Data(format!("sample {id}: non-finite trimodal score")));
    }
    Ok(TrimodalScore { sample_id: id, sim_img_desc, sim_desc_kw, sim_img_kw, fused })
}

/// `(high, low)`: scores at or above the threshold are high.
pub fn split_by_threshold(scores: &[TrimodalScore], tau: f64) -> (BTreeSet<SampleId>, BTreeSet<SampleId>) {
    let mut high = BTreeSet::new();
    let mut low = BTreeSet::new();
    for s in scores {
        if s.fused >= tau {
            high.insert(s.sample_id);
        } else {
            low.insert(s.sample_id);
        }
    }
    (high, low)
}

pub const ENHANCED_DIM: usize = 1536;

/// Image embedding and description embedding side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedEmbedding {
    pub sample_id: SampleId,
    pub vector: Vec<f32>,
}

pub fn build_enhanced_embedding(sample: &Sample, image: &EmbeddingVector, text: &EmbeddingVector) -> Result<EnhancedEmbedding> {
    expect_expert(&sample.id, "image", image, EmbeddingExpert::ClipImage)?;
    expect_expert(&sample.id, "description", text, EmbeddingExpert::ClipText)?;
    if image.dim() + text.dim() != ENHANCED_DIM {
        return Err(Error::Precondition(format!(
            "sample {}: halves of dim {} and {} do not form a {ENHANCED_DIM}-dim vector",
            sample.id,
            image.dim(),
            text.dim()
        )));
    }
    let mut vector = Vec::with_capacity(ENHANCED_DIM);
    vector.extend_from_slice(image.data());
    vector.extend_from_slice(text.data());
    Ok(EnhancedEmbedding { sample_id: sample.id, vector })
}

/// Cosine of two enhanced embeddings; each has norm sqrt(2).
pub fn enhanced_cosine(a: &EnhancedEmbedding, b: &EnhancedEmbedding) -> f64 {
    dot(&a.vector, &b.vector) / 2.0
}
