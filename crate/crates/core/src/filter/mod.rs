//! First-stage filtering: trimodal consistency scoring, enhanced embeddings,
//! density clustering and cluster triage with prompt feedback.

pub mod hdbscan;
mod score;
mod triage;

use std::collections::BTreeMap;

pub use hdbscan::{hdbscan, Clustering, HdbscanParams, OUTLIER};
pub use score::{
    build_enhanced_embedding, enhanced_cosine, score_trimodal, split_by_threshold, EnhancedEmbedding, FusionWeights,
    TrimodalInputs, TrimodalScore, ENHANCED_DIM,
};
pub use triage::{
    build_prompt_feedback, sample_for_triage, triage_clusters, ClusterTriage, PromptFeedback, TriageBucket, TriageThresholds,
    AMBIGUOUS_HEADER, DISCARD_MAX, REMOVAL_HEADER, RETAIN_HEADER, STRONG_MIN,
};

use crate::model::SampleId;

/// Cluster enhanced embeddings; returns members per cluster id, with
/// outliers under [`OUTLIER`]. Input order does not matter.
pub fn cluster(embeddings: &[EnhancedEmbedding], params: &HdbscanParams) -> (BTreeMap<i64, Vec<SampleId>>, Option<String>) {
    let mut sorted: Vec<&EnhancedEmbedding> = embeddings.iter().collect();
    sorted.sort_by_key(|e| e.sample_id);
    let points: Vec<Vec<f32>> = sorted.iter().map(|e| e.vector.clone()).collect();
    let result = hdbscan(&points, params);
    if let Some(w) = &result.warning {
        log::warn!("clustering: {w}");
    }
    let mut groups: BTreeMap<i64, Vec<SampleId>> = BTreeMap::new();
    for (e, label) in sorted.iter().zip(result.labels) {
        groups.entry(label).or_default().push(e.sample_id);
    }
    (groups, result.warning)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_ignores_input_order() {
        let mut rng = crate::rng::seeded_rng(5);
        use rand::Rng;
        let mut embs = Vec::new();
        for i in 0..40u32 {
            let base = if i < 20 { 0.0 } else { 1.0 };
            let mut v = vec![0.0f32; 4];
            v[0] = base + rng.random_range(-0.01..0.01);
            v[1] = rng.random_range(-0.01..0.01);
            embs.push(EnhancedEmbedding { sample_id: SampleId::from_content(&i.to_le_bytes()), vector: v });
        }
        let params = HdbscanParams { min_cluster_size: 5, min_samples: 3 };
        let (a, _) = cluster(&embs, &params);
        embs.reverse();
        let (b, _) = cluster(&embs, &params);
        assert_eq!(a, b);
        assert_eq!(a.keys().filter(|k| **k != OUTLIER).count(), 2);
    }
}
