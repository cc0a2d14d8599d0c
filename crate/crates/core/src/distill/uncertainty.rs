use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::vote::argmax;
use crate::error::{Error, Result};
use crate::model::{ClassId, LabelSpace, SampleId};
use crate::rng::{derive_seed, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    Conflict,
    LowFas,
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationStatus {
    Pending,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationItem {
    pub sample_id: SampleId,
    pub reason: EscalationReason,
    pub attributed_class: Option<ClassId>,
    pub score: f64,
    pub round: u32,
    pub status: EscalationStatus,
    pub resolution: Option<ClassId>,
}

impl EscalationItem {
    pub fn pending(sample_id: SampleId, reason: EscalationReason, attributed_class: Option<ClassId>, score: f64, round: u32) -> Self {
        EscalationItem { sample_id, reason, attributed_class, score, round, status: EscalationStatus::Pending, resolution: None }
    }
}

/// An accepted sample with its predicted class and alignment to that class.
#[derive(Debug, Clone, PartialEq)]
pub struct LowFasCandidate {
    pub sample_id: SampleId,
    pub class: ClassId,
    pub fas: f64,
}

/// `⌈α·n⌉`, tolerant of float error in `α·n`, at least 1 for non-empty classes.
pub fn low_fas_pool_size(alpha: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = alpha * n as f64;
    ((raw - 1e-9).ceil() as usize).clamp(1, n)
}

/// Per predicted class: rank by alignment ascending (ties by sample id),
/// keep the bottom `⌈α·n⌉`, and draw `min(K_L, pool)` of them uniformly.
pub fn sample_low_fas(candidates: &[LowFasCandidate], alpha: f64, k_l: usize, seed: u64, round: u32) -> Result<Vec<EscalationItem>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let mut by_class: BTreeMap<&ClassId, Vec<&LowFasCandidate>> = BTreeMap::new();
    for c in candidates {
        by_class.entry(&c.class).or_default().push(c);
    }
    let mut out = Vec::new();
    for (class, mut members) in by_class {
        members.sort_by(|a, b| a.fas.total_cmp(&b.fas).then(a.sample_id.cmp(&b.sample_id)));
        let pool = &members[..low_fas_pool_size(alpha, members.len())];
        let mut rng = seeded_rng(derive_seed(seed, &format!("low-fas-{class}")));
        let mut drawn: Vec<&&LowFasCandidate> = pool.choose_multiple(&mut rng, k_l.min(pool.len())).collect();
        drawn.sort_by(|a, b| a.fas.total_cmp(&b.fas).then(a.sample_id.cmp(&b.sample_id)));
        out.extend(
            drawn
                .into_iter()
                .map(|c| EscalationItem::pending(c.sample_id, EscalationReason::LowFas, Some(c.class.clone()), c.fas, round)),
        );
    }
    Ok(out)
}

/// Non-target boundary strength: the best alignment over all classes and
/// the class attaining it (ties to the lowest class index).
pub fn boundary_strength(fas: &[f64]) -> (usize, f64) {
    let i = argmax(fas);
    (i, fas[i])
}

/// Top `K_H` non-targets by boundary strength, ties by sample id.
pub fn boundary_candidates(non_targets: &[(SampleId, Vec<f64>)], k_h: usize, space: &LabelSpace, round: u32) -> Result<Vec<EscalationItem>> {
    let mut scored = Vec::with_capacity(non_targets.len());
    for (id, fas) in non_targets {
        if fas.len() != space.len() {
            return Err(Error::Precondition(format!("sample {id}: {} alignment scores for {} classes", fas.len(), space.len())));
        }
        let (c, b) = boundary_strength(fas);
        scored.push((*id, c, b));
    }
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    scored.truncate(k_h);
    Ok(scored
        .into_iter()
        .map(|(id, c, b)| EscalationItem::pending(id, EscalationReason::Boundary, Some(space.class(c).clone()), b, round))
        .collect())
}
