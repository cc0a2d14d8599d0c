use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SampleId;
use crate::rng::{derive_seed, seeded_rng};
use crate::sidecar::VlmClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageBucket {
    Strong,
    Mixed,
    Discard,
}

pub const STRONG_MIN: f64 = 0.8;
pub const DISCARD_MAX: f64 = 0.2;

impl TriageBucket {
    /// Bucket under the default thresholds.
    pub fn from_score(score: f64) -> Self {
        TriageThresholds::default().bucket(score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageThresholds {
    pub strong_min: f64,
    pub discard_max: f64,
}

impl Default for TriageThresholds {
    fn default() -> Self {
        TriageThresholds { strong_min: STRONG_MIN, discard_max: DISCARD_MAX }
    }
}

impl TriageThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.discard_max && self.discard_max < self.strong_min && self.strong_min <= 1.0) {
            return Err(Error::Config(format!(
                "triage thresholds need 0 <= discard_max < strong_min <= 1, got {} and {}",
                self.discard_max, self.strong_min
            )));
        }
        Ok(())
    }

    pub fn bucket(&self, score: f64) -> TriageBucket {
        if score >= self.strong_min {
            TriageBucket::Strong
        } else if score <= self.discard_max {
            TriageBucket::Discard
        } else {
            TriageBucket::Mixed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTriage {
    pub cluster_id: i64,
    pub member_ids: Vec<SampleId>,
    pub sampled_ids: Vec<SampleId>,
    pub score: f64,
    pub bucket: TriageBucket,
}

/// Uniform sample of `min(n_per, |members|)` ids per cluster, drawn from a
/// per-cluster seed so clusters do not perturb each other. Output ids are
/// sorted.
pub fn sample_for_triage(clusters: &BTreeMap<i64, Vec<SampleId>>, n_per: usize, seed: u64) -> BTreeMap<i64, Vec<SampleId>> {
    clusters
        .iter()
        .map(|(&cid, members)| {
            let mut sorted = members.clone();
            sorted.sort();
            sorted.dedup();
            let mut rng = seeded_rng(derive_seed(seed, &format!("triage-cluster-{cid}")));
            let mut picked: Vec<SampleId> = sorted.choose_multiple(&mut rng, n_per.min(sorted.len())).copied().collect();
            picked.sort();
            (cid, picked)
        })
        .collect()
}

/// Score each cluster from the human relevance labels of its sampled ids.
pub fn triage_clusters(
    clusters: &BTreeMap<i64, Vec<SampleId>>,
    labels: &BTreeMap<SampleId, u8>,
    n_per: usize,
    seed: u64,
    thresholds: &TriageThresholds,
) -> Result<Vec<ClusterTriage>> {
    let samples = sample_for_triage(clusters, n_per, seed);
    let missing: Vec<String> = samples
        .values()
        .flatten()
        .filter(|id| !labels.contains_key(id))
        .map(|id| id.to_hex())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Precondition(format!(
            "{} sampled ids lack triage labels: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(clusters.len());
    for (cid, sampled) in samples {
        let mut members = clusters[&cid].clone();
        members.sort();
        members.dedup();
        let mut relevant = 0u32;
        for id in &sampled {
            match labels[id] {
                0 => {}
                1 => relevant += 1,
                other => return Err(Error::Data(format!("triage label for {id} is {other}, expected 0 or 1"))),
            }
        }
        let score = if sampled.is_empty() { 0.0 } else { relevant as f64 / sampled.len() as f64 };
        out.push(ClusterTriage { cluster_id: cid, member_ids: members, sampled_ids: sampled, score, bucket: thresholds.bucket(score) });
    }
    Ok(out)
}

pub const RETAIN_HEADER: &str = "Retain-worthy traits";
pub const AMBIGUOUS_HEADER: &str = "Ambiguous traits";
pub const REMOVAL_HEADER: &str = "Removal criteria";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFeedback {
    pub packet: String,
    pub prompt: String,
    /// Set when the revision call failed and the initial prompt was kept.
    pub warning: Option<String>,
}

/// Summarize the triage outcome per bucket and ask the VLM to revise the
/// description prompt. A failing VLM leaves the prompt unchanged.
pub fn build_prompt_feedback(
    triage: &[ClusterTriage],
    descriptions: &BTreeMap<SampleId, String>,
    exemplars_per_bucket: usize,
    initial_prompt: &str,
    vlm: &dyn VlmClient,
) -> Result<PromptFeedback> {
    if triage.is_empty() {
        return Err(Error::Precondition("prompt feedback needs at least one triaged cluster".into()));
    }
    let mut packet = String::new();
    for (bucket, header) in [
        (TriageBucket::Strong, RETAIN_HEADER),
        (TriageBucket::Mixed, AMBIGUOUS_HEADER),
        (TriageBucket::Discard, REMOVAL_HEADER),
    ] {
        packet.push_str(&format!("## {header}\n"));
        let mut shown = 0;
        for t in triage.iter().filter(|t| t.bucket == bucket) {
            packet.push_str(&format!(
                "- cluster {}: {} members, relevance {:.2}\n",
                t.cluster_id,
                t.member_ids.len(),
                t.score
            ));
            for id in &t.sampled_ids {
                if shown >= exemplars_per_bucket {
                    break;
                }
                if let Some(d) = descriptions.get(id) {
                    packet.push_str(&format!("  - {}\n", d.replace('\n', " ")));
                    shown += 1;
                }
            }
        }
        packet.push('\n');
    }
    match vlm.revise_prompt(initial_prompt, &packet) {
        Ok(prompt) => Ok(PromptFeedback { packet, prompt, warning: None }),
        Err(e) => {
            log::warn!("prompt revision failed, keeping the current prompt: {e}");
            Ok(PromptFeedback { packet, prompt: initial_prompt.to_string(), warning: Some(e.to_string()) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidecar::mock::MockSidecar;
    use crate::sidecar::Op;
    use proptest::prelude::*;

    fn ids(range: std::ops::Range<u32>) -> Vec<SampleId> {
        range.map(|i| SampleId::from_content(&i.to_le_bytes())).collect()
    }

    fn one_cluster(members: Vec<SampleId>) -> BTreeMap<i64, Vec<SampleId>> {
        BTreeMap::from([(0, members)])
    }

    fn label_sampled(clusters: &BTreeMap<i64, Vec<SampleId>>, seed: u64, values: &[u8]) -> BTreeMap<SampleId, u8> {
        let s = sample_for_triage(clusters, 5, seed);
        s[&0].iter().zip(values).map(|(id, v)| (*id, *v)).collect()
    }

    #[test]
    fn all_relevant_is_strong() {
        let c = one_cluster(ids(0..20));
        let labels = label_sampled(&c, 1, &[1, 1, 1, 1, 1]);
        let t = triage_clusters(&c, &labels, 5, 1, &TriageThresholds::default()).unwrap();
        assert_eq!(t[0].score, 1.0);
        assert_eq!(t[0].bucket, TriageBucket::Strong);
    }

    #[test]
    fn two_of_five_is_mixed() {
        let c = one_cluster(ids(0..20));
        let labels = label_sampled(&c, 1, &[1, 1, 0, 0, 0]);
        let t = triage_clusters(&c, &labels, 5, 1, &TriageThresholds::default()).unwrap();
        assert!((t[0].score - 0.4).abs() < 1e-12);
        assert_eq!(t[0].bucket, TriageBucket::Mixed);
    }

    #[test]
    fn three_of_five_is_mixed() {
        let c = one_cluster(ids(0..20));
        let labels = label_sampled(&c, 9, &[1, 1, 1, 0, 0]);
        let t = triage_clusters(&c, &labels, 5, 9, &TriageThresholds::default()).unwrap();
        assert!((t[0].score - 0.6).abs() < 1e-12);
        assert_eq!(t[0].bucket, TriageBucket::Mixed);
    }

    #[test]
    fn thresholds() {
        assert_eq!(TriageBucket::from_score(0.8), TriageBucket::Strong);
        assert_eq!(TriageBucket::from_score(0.2), TriageBucket::Discard);
        assert_eq!(TriageBucket::from_score(0.0), TriageBucket::Discard);
        assert_eq!(TriageBucket::from_score(0.79), TriageBucket::Mixed);
    }

    #[test]
    fn small_cluster_is_fully_sampled() {
        let c = one_cluster(ids(0..3));
        let s = sample_for_triage(&c, 5, 3);
        assert_eq!(s[&0].len(), 3);
        let labels: BTreeMap<SampleId, u8> = s[&0].iter().map(|id| (*id, 1)).collect();
        assert!(triage_clusters(&c, &labels, 5, 3, &TriageThresholds::default()).is_ok());
    }

    #[test]
    fn missing_labels_are_listed() {
        let c = one_cluster(ids(0..10));
        let err = triage_clusters(&c, &BTreeMap::new(), 5, 0, &TriageThresholds::default()).unwrap_err();
        assert!(err.to_string().starts_with("precondition failed: 5 sampled ids"));
    }

    #[test]
    fn sampling_depends_on_seed_not_order() {
        let mut members = ids(0..40);
        let c = one_cluster(members.clone());
        members.reverse();
        let c_rev = one_cluster(members);
        assert_eq!(sample_for_triage(&c, 5, 11), sample_for_triage(&c_rev, 5, 11));
        let differs = (0..10).any(|s| sample_for_triage(&c, 5, s) != sample_for_triage(&c, 5, 11));
        assert!(differs);
    }

    fn triaged(bucket: TriageBucket, cid: i64, members: Vec<SampleId>) -> ClusterTriage {
        ClusterTriage { cluster_id: cid, sampled_ids: members.clone(), member_ids: members, score: 1.0, bucket }
    }

    #[test]
    fn feedback_with_only_strong_clusters() {
        let members = ids(0..3);
        let descs: BTreeMap<SampleId, String> = members.iter().map(|id| (*id, format!("desc {id}"))).collect();
        let fb = build_prompt_feedback(&[triaged(TriageBucket::Strong, 0, members)], &descs, 2, "P_init", &MockSidecar::new()).unwrap();
        let ambiguous = fb.packet.split(&format!("## {AMBIGUOUS_HEADER}\n")).nth(1).unwrap();
        assert!(ambiguous.starts_with('\n'));
        assert!(fb.packet.ends_with(&format!("## {REMOVAL_HEADER}\n\n")));
        assert_eq!(fb.packet.matches("  - desc").count(), 2);
        assert!(fb.warning.is_none());
    }

    #[test]
    fn echoed_prompt_contains_all_headers() {
        let t = vec![
            triaged(TriageBucket::Strong, 0, ids(0..2)),
            triaged(TriageBucket::Mixed, 1, ids(2..4)),
            triaged(TriageBucket::Discard, 2, ids(4..6)),
        ];
        let fb = build_prompt_feedback(&t, &BTreeMap::new(), 3, "P_init", &MockSidecar::new()).unwrap();
        for h in [RETAIN_HEADER, AMBIGUOUS_HEADER, REMOVAL_HEADER] {
            assert!(fb.prompt.contains(h), "{h}");
        }
        assert!(fb.prompt.starts_with("P_init"));
    }

    #[test]
    fn vlm_down_keeps_initial_prompt() {
        let mut vlm = MockSidecar::new();
        vlm.script_mut().fail_ops.insert(Op::RevisePrompt);
        let fb = build_prompt_feedback(&[triaged(TriageBucket::Mixed, 0, ids(0..2))], &BTreeMap::new(), 3, "P_init", &vlm).unwrap();
        assert_eq!(fb.prompt, "P_init");
        assert!(fb.warning.is_some());
    }

    proptest! {
        #[test]
        fn uniform_clusters_keep_their_bucket(seed_a in any::<u64>(), seed_b in any::<u64>(), size in 1u32..40, value in 0u8..2) {
            let c = one_cluster(ids(0..size));
            let labels: BTreeMap<SampleId, u8> = c[&0].iter().map(|id| (*id, value)).collect();
            let a = triage_clusters(&c, &labels, 5, seed_a, &TriageThresholds::default()).unwrap();
            let b = triage_clusters(&c, &labels, 5, seed_b, &TriageThresholds::default()).unwrap();
            prop_assert_eq!(a[0].bucket, b[0].bucket);
            prop_assert!(a[0].sampled_ids.iter().all(|id| a[0].member_ids.contains(id)));
            prop_assert_eq!(a[0].sampled_ids.len(), (size as usize).min(5));
        }

        #[test]
        fn buckets_partition_clusters(scores in proptest::collection::vec(0u8..6, 1..20)) {
            let mut clusters = BTreeMap::new();
            let mut labels = BTreeMap::new();
            for (cid, &k) in scores.iter().enumerate() {
                let members = ids(cid as u32 * 100..cid as u32 * 100 + 5);
                for (j, id) in members.iter().enumerate() {
                    labels.insert(*id, u8::from((j as u8) < k));
                }
                clusters.insert(cid as i64, members);
            }
            let t = triage_clusters(&clusters, &labels, 5, 0, &TriageThresholds::default()).unwrap();
            prop_assert_eq!(t.len(), scores.len());
            for (tr, &k) in t.iter().zip(&scores) {
                prop_assert!((tr.score - k.min(5) as f64 / 5.0).abs() < 1e-12);
            }
        }
    }
}
