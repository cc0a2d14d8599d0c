use serde::{Deserialize, Serialize};

use super::index::{ExpertId, ExpertQuery, SubIndex, VectorIndex};
use crate::error::{Error, Result};
use crate::model::{dot, ClassId, EmbeddingVector, LabelSpace, SampleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Position of the entry in the sub-index.
    pub entry: usize,
    pub similarity: f64,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertVerdict {
    pub expert: ExpertId,
    /// Sorted by similarity descending, ties by entry position.
    pub neighbors: Vec<Neighbor>,
    pub predicted: ClassId,
    /// Softmax vote mass per class, in label-space order.
    pub votes: Vec<f64>,
    /// Mean neighbour similarity.
    pub topic_conf: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Class mass of `softmax(ξ / t)` over `(ξ, class)` pairs.
pub fn softmax_vote(neighbors: &[(f64, usize)], n_classes: usize, t: f64) -> Vec<f64> {
    let mut votes = vec![0.0; n_classes];
    let Some(max) = neighbors.iter().map(|n| n.0).max_by(f64::total_cmp) else {
        return votes;
    };
    let weights: Vec<f64> = neighbors.iter().map(|(xi, _)| ((xi - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    for ((_, class), w) in neighbors.iter().zip(&weights) {
        votes[*class] += w / total;
    }
    votes
}

/// Exact top-K neighbours, softmax-weighted class vote at temperature `t`.
pub fn expert_predict(query: &EmbeddingVector, sub: &SubIndex, space: &LabelSpace, k: usize, t: f64) -> Result<ExpertVerdict> {
    if k == 0 {
        return Err(Error::Precondition("K must be at least 1".into()));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Precondition(format!("temperature must be positive, got {t}")));
    }
    if sub.is_empty() {
        return Err(Error::Precondition(format!("the {} sub-index is empty", sub.expert())));
    }
    if query.expert() != sub.expert().embedding() {
        return Err(Error::Precondition(format!("{} query against the {} sub-index", query.expert(), sub.expert())));
    }
    let sims = sub.similarities(query.data());
    let mut order: Vec<usize> = (0..sims.len()).collect();
    let k = k.min(order.len());
    let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);

    let scored: Vec<(f64, usize)> = order.iter().map(|&i| (sims[i], sub.entry(i).0)).collect();
    let votes = softmax_vote(&scored, space.len(), t);
    let predicted = space.class(argmax(&votes)).clone();
    let topic_conf = order.iter().map(|&i| sims[i]).sum::<f64>() / k as f64;
    let neighbors = order
        .iter()
        .map(|&i| Neighbor { entry: i, similarity: sims[i], label: space.class(sub.entry(i).0).clone() })
        .collect();
    Ok(ExpertVerdict { expert: sub.expert(), neighbors, predicted, votes, topic_conf })
}

/// Majority label of the three verdicts; on a three-way split the CLIP
/// label wins and the conflict flag is set.
pub fn ensemble_vote(verdicts: &[ExpertVerdict]) -> Result<(ClassId, bool)> {
    let clip = expert_verdict(verdicts, ExpertId::Clip)?;
    for e in [ExpertId::Dinov2, ExpertId::Beit] {
        expert_verdict(verdicts, e)?;
    }
    for v in verdicts {
        if verdicts.iter().filter(|o| o.predicted == v.predicted).count() >= 2 {
            return Ok((v.predicted.clone(), false));
        }
    }
    Ok((clip.predicted.clone(), true))
}

fn expert_verdict(verdicts: &[ExpertVerdict], e: ExpertId) -> Result<&ExpertVerdict> {
    let mut it = verdicts.iter().filter(|v| v.expert == e);
    match (it.next(), it.next(), verdicts.len()) {
        (Some(v), None, 3) => Ok(v),
        _ => Err(Error::Precondition(format!("expected exactly one verdict per expert, got {}", verdicts.len()))),
    }
}

fn class_mean<'a>(index: &'a VectorIndex, e: ExpertId, class: usize) -> Result<&'a [f32]> {
    index
        .sub(e)
        .class_mean(class)
        .ok_or_else(|| Error::Precondition(format!("no {} mean for class {}", e, index.space().class(class))))
}

/// Per-expert cosine to the class mean of `class`, and their average.
pub fn label_confidence(query: &ExpertQuery<'_>, class: &ClassId, index: &VectorIndex) -> Result<([f64; 3], f64)> {
    let c = index.space().require(class)?;
    let mut per = [0.0; 3];
    for e in ExpertId::ALL {
        per[e.position()] = dot(query[e.position()].data(), class_mean(index, e, c)?);
    }
    Ok((per, per.iter().sum::<f64>() / 3.0))
}

/// Mean over experts of the cosine to the class mean of `class`.
pub fn fas(query: &ExpertQuery<'_>, class: &ClassId, index: &VectorIndex) -> Result<f64> {
    Ok(label_confidence(query, class, index)?.1)
}

/// Alignment score against every class, in label-space order.
pub fn fas_all(query: &ExpertQuery<'_>, index: &VectorIndex) -> Result<Vec<f64>> {
    index.space().class_ids().map(|c| fas(query, c, index)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    NonTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub sample_id: SampleId,
    pub label: ClassId,
    pub conflict: bool,
    pub topic_conf: f64,
    pub label_conf: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub topic: f64,
    pub label: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { topic: 0.65, label: 0.45 }
    }
}

pub fn gate(topic_conf: f64, label_conf: f64, th: &Thresholds) -> Outcome {
    if topic_conf >= th.topic && label_conf >= th.label {
        Outcome::Accepted
    } else {
        Outcome::NonTarget
    }
}

/// Ensemble the verdicts and apply the dual confidence gate. The topic
/// confidence comes from `topic_expert`'s verdict.
pub fn decide(sample_id: SampleId, verdicts: &[ExpertVerdict], label_conf: f64, th: &Thresholds, topic_expert: ExpertId) -> Result<Decision> {
    for (name, v) in [("topic", th.topic), ("label", th.label)] {
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} threshold {v} outside [-1, 1]")));
        }
    }
    let (label, conflict) = ensemble_vote(verdicts)?;
    let topic_conf = expert_verdict(verdicts, topic_expert)?.topic_conf;
    Ok(Decision { sample_id, label, conflict, topic_conf, label_conf, outcome: gate(topic_conf, label_conf, th) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteParams {
    pub k: usize,
    pub temperature: f64,
    pub thresholds: Thresholds,
    pub topic_expert: ExpertId,
}

impl Default for VoteParams {
    fn default() -> Self {
        VoteParams { k: 7, temperature: 0.07, thresholds: Thresholds::default(), topic_expert: ExpertId::Clip }
    }
}

/// Everything the round needs about one pooled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub decision: Decision,
    pub verdicts: Vec<ExpertVerdict>,
    /// Alignment score against every class, in label-space order.
    pub fas: Vec<f64>,
}

pub fn predict(sample_id: SampleId, query: &ExpertQuery<'_>, index: &VectorIndex, params: &VoteParams) -> Result<Prediction> {
    let verdicts = ExpertId::ALL
        .iter()
        .map(|&e| expert_predict(query[e.position()], index.sub(e), index.space(), params.k, params.temperature))
        .collect::<Result<Vec<_>>>()?;
    let fas = fas_all(query, index)?;
    let (label, _) = ensemble_vote(&verdicts)?;
    let label_conf = fas[index.space().require(&label)?];
    let decision = decide(sample_id, &verdicts, label_conf, &params.thresholds, params.topic_expert)?;
    Ok(Prediction { decision, verdicts, fas })
}
