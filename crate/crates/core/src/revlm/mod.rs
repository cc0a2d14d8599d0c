//! Region-evidence relabeling of committed samples.
//!
//! A proposer call marks the subject cells of each grid and flags traces per
//! cell. Two independent validator calls follow, one on the whole image and
//! one on the subject and flagged crops, and [`fuse`] combines them with the
//! per-trace region support into the final [`SemanticLabel`].

mod grid;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use grid::{make_grid, Granularity, RegionBox, RegionGrid};

use crate::error::{Error, Result};
use crate::model::{ClassDef, ClassId, LabelSpace, SampleId, NO_TRACE};
use crate::sidecar::protocol::{GridSpec, RegionRef, RegionRole};
use crate::sidecar::{ProposeRequest, ProposeResponse, ValidateMode, ValidateRequest, ValidateResponse, VlmClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Category disagreed with the coarse label; only the whole-image
    /// verdict is kept and the sample goes to human review.
    GlobalOnly,
    /// Every kept trace was named by both validator calls.
    RegionConfirmed,
    /// At least one kept trace rests on the local verdict plus region support.
    RegionOverridden,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Evidence {
    pub granularity: Granularity,
    #[serde(rename = "box")]
    pub index: usize,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticLabel {
    pub sample_id: SampleId,
    pub category: ClassId,
    /// Positive traces only; empty means the verdict is "none".
    pub traces: BTreeSet<String>,
    pub evidence: Vec<Evidence>,
    pub provenance: Provenance,
}

/// Proposer answer for one grid after validation and repair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridFlags {
    pub granularity: Granularity,
    pub subject: BTreeSet<usize>,
    /// One trace set per grid box; `{"none"}` when nothing is flagged.
    pub flags: Vec<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposerOutput {
    pub grids: Vec<GridFlags>,
    /// Repairs applied to the raw answer, for the audit log.
    pub notes: Vec<String>,
}

impl ProposerOutput {
    /// Number of subject cells, over all grids, flagged with `trace`.
    pub fn region_support(&self, trace: &str) -> usize {
        self.grids
            .iter()
            .map(|g| g.subject.iter().filter(|&&i| g.flags[i].contains(trace)).count())
            .sum()
    }

    pub fn support_map<'a>(&self, traces: impl IntoIterator<Item = &'a String>) -> BTreeMap<String, usize> {
        traces.into_iter().map(|t| (t.clone(), self.region_support(t))).collect()
    }

    fn evidence_for(&self, trace: &str) -> Vec<Evidence> {
        let mut out = Vec::new();
        for g in &self.grids {
            for &i in &g.subject {
                if g.flags[i].contains(trace) {
                    out.push(Evidence { granularity: g.granularity, index: i, trace: trace.to_string() });
                }
            }
        }
        out
    }
}

/// Drop "none" from a cell that also carries a real trace, and fill an empty
/// cell with "none". Returns whether anything changed.
pub fn repair_none_exclusivity(flags: &mut BTreeSet<String>) -> bool {
    if flags.is_empty() {
        flags.insert(NO_TRACE.to_string());
        return true;
    }
    if flags.len() > 1 && flags.remove(NO_TRACE) {
        return true;
    }
    false
}

/// Check a raw proposer answer against the grids that were sent.
pub fn check_proposal(raw: &ProposeResponse, grids: &[RegionGrid], traces: &[String]) -> Result<ProposerOutput> {
    let vocab: BTreeSet<&str> = traces.iter().map(String::as_str).collect();
    let mut notes = Vec::new();
    let mut out = Vec::with_capacity(grids.len());
    for grid in grids {
        let g = grid.granularity;
        let mut matching = raw.grids.iter().filter(|p| p.granularity == g);
        let proposal = matching
            .next()
            .ok_or_else(|| Error::Protocol(format!("proposer omitted the {g} grid")))?;
        if matching.next().is_some() {
            return Err(Error::Protocol(format!("proposer answered the {g} grid twice")));
        }
        let n = grid.boxes.len();
        let mut subject = BTreeSet::new();
        for &i in &proposal.subject {
            if i >= n {
                return Err(Error::Protocol(format!("subject box {i} out of range for the {g} grid ({n} boxes)")));
            }
            subject.insert(i);
        }
        if subject.is_empty() {
            return Err(Error::Protocol(format!("proposer returned no subject boxes for the {g} grid")));
        }
        let mut flags: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
        for bf in &proposal.flags {
            if bf.index >= n {
                return Err(Error::Protocol(format!("flagged box {} out of range for the {g} grid ({n} boxes)", bf.index)));
            }
            for t in &bf.traces {
                if !vocab.contains(t.as_str()) {
                    return Err(Error::Protocol(format!("unknown trace {t:?} on {g} box {}", bf.index)));
                }
                flags[bf.index].insert(t.clone());
            }
        }
        for (i, cell) in flags.iter_mut().enumerate() {
            let had_flags = !cell.is_empty();
            if repair_none_exclusivity(cell) && had_flags {
                notes.push(format!("{g} box {i}: cleared \"{NO_TRACE}\" alongside other traces"));
            }
        }
        out.push(GridFlags { granularity: g, subject, flags });
    }
    Ok(ProposerOutput { grids: out, notes })
}

/// A validator verdict restricted to the label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub category: ClassId,
    /// Positive traces; empty for "none".
    pub traces: BTreeSet<String>,
}

impl Verdict {
    pub fn from_response(resp: &ValidateResponse, space: &LabelSpace) -> Result<Self> {
        if space.index_of(&resp.category).is_none() {
            return Err(Error::Protocol(format!("validator returned unknown category {}", resp.category)));
        }
        let mut traces = BTreeSet::new();
        for t in &resp.traces {
            if !space.traces().iter().any(|k| k == t) {
                return Err(Error::Protocol(format!("validator returned unknown trace {t:?}")));
            }
            if t != NO_TRACE {
                traces.insert(t.clone());
            }
        }
        Ok(Verdict { category: resp.category.clone(), traces })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fusion {
    pub category: ClassId,
    pub traces: BTreeSet<String>,
    pub provenance: Provenance,
    pub needs_review: bool,
}

/// Combine the coarse label, both verdicts, and per-trace region support.
///
/// A trace is kept when both verdicts name it, or when the local verdict
/// names it and at least `min_support` subject cells flag it. If the local
/// category differs from the coarse label the coarse label stands, only the
/// whole-image traces are kept, and the sample is marked for review.
pub fn fuse(coarse: &ClassId, global: &Verdict, local: &Verdict, support: &BTreeMap<String, usize>, min_support: usize) -> Fusion {
    if &local.category != coarse {
        return Fusion {
            category: coarse.clone(),
            traces: global.traces.clone(),
            provenance: Provenance::GlobalOnly,
            needs_review: true,
        };
    }
    let mut traces = BTreeSet::new();
    let mut overridden = false;
    for t in &local.traces {
        if global.traces.contains(t) {
            traces.insert(t.clone());
        } else if support.get(t).copied().unwrap_or(0) >= min_support {
            traces.insert(t.clone());
            overridden = true;
        }
    }
    Fusion {
        category: coarse.clone(),
        traces,
        provenance: if overridden { Provenance::RegionOverridden } else { Provenance::RegionConfirmed },
        needs_review: false,
    }
}

/// Category prompt built from the class feature description and the trace
/// vocabulary.
pub fn class_prompt(class: &ClassDef, traces: &[String]) -> String {
    let mut p = format!("Category: {} ({})", class.name, class.id);
    if !class.description.trim().is_empty() {
        p.push_str("\nFeatures: ");
        p.push_str(class.description.trim());
    }
    p.push_str("\nTrace attributes: ");
    p.push_str(&traces.join(", "));
    p
}

#[derive(Debug, Clone)]
pub struct RelabelParams {
    pub region_support_min: usize,
    pub granularities: Vec<Granularity>,
    /// Classes relabeled with the coarsest grid only.
    pub single_grid_classes: BTreeSet<ClassId>,
}

impl Default for RelabelParams {
    fn default() -> Self {
        RelabelParams {
            region_support_min: 2,
            granularities: Granularity::ALL.to_vec(),
            single_grid_classes: BTreeSet::new(),
        }
    }
}

/// Queue entry for a category disagreement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelReviewItem {
    pub sample_id: SampleId,
    pub image_path: String,
    pub coarse_label: ClassId,
    pub global_category: ClassId,
    pub local_category: ClassId,
    pub global_traces: BTreeSet<String>,
    pub local_traces: BTreeSet<String>,
    pub evidence: Vec<Evidence>,
    pub round: u32,
}

#[derive(Debug, Clone)]
pub struct RelabelOutcome {
    pub label: SemanticLabel,
    pub proposal: ProposerOutput,
    pub raw_proposal: ProposeResponse,
    pub review: Option<RelabelReviewItem>,
}

pub struct RelabelInput<'a> {
    pub sample_id: SampleId,
    pub image_path: &'a str,
    pub image: &'a [u8],
    pub width: u32,
    pub height: u32,
    pub coarse: &'a ClassId,
    pub round: u32,
}

/// Propose, validate twice, fuse. Any VLM or protocol failure is returned
/// as an error and the caller marks the sample relabel-failed.
pub fn relabel_sample(input: &RelabelInput<'_>, space: &LabelSpace, params: &RelabelParams, vlm: &dyn VlmClient) -> Result<RelabelOutcome> {
    let class = space
        .def(input.coarse)
        .ok_or_else(|| Error::Precondition(format!("coarse label {} is not in the label space", input.coarse)))?;
    let prompt = class_prompt(class, space.traces());
    let mut granularities: Vec<Granularity> = params.granularities.clone();
    granularities.sort();
    granularities.dedup();
    if params.single_grid_classes.contains(input.coarse) {
        granularities.truncate(1);
    }
    if granularities.is_empty() {
        return Err(Error::Config("relabeling needs at least one grid granularity".into()));
    }
    let grids: Vec<RegionGrid> = granularities
        .iter()
        .map(|&g| make_grid(input.width, input.height, g))
        .collect::<Result<_>>()?;

    let raw = vlm.propose(&ProposeRequest {
        image: input.image.to_vec(),
        prompt: prompt.clone(),
        traces: space.traces().to_vec(),
        grids: grids.iter().map(|g| GridSpec { granularity: g.granularity, boxes: g.boxes.clone() }).collect(),
    })?;
    let proposal = check_proposal(&raw, &grids, space.traces())?;

    let categories: Vec<ClassId> = space.class_ids().cloned().collect();
    let base = ValidateRequest {
        mode: ValidateMode::Global,
        image: input.image.to_vec(),
        prompt,
        category_hint: input.coarse.clone(),
        categories,
        traces: space.traces().to_vec(),
        regions: Vec::new(),
    };
    let global = Verdict::from_response(&vlm.validate(&base)?, space)?;
    let local_req = ValidateRequest { mode: ValidateMode::Local, regions: local_regions(&proposal, &grids), ..base };
    let local = Verdict::from_response(&vlm.validate(&local_req)?, space)?;

    let support = proposal.support_map(space.positive_traces());
    let fusion = fuse(input.coarse, &global, &local, &support, params.region_support_min);
    let evidence: Vec<Evidence> = if fusion.provenance == Provenance::GlobalOnly {
        Vec::new()
    } else {
        fusion.traces.iter().flat_map(|t| proposal.evidence_for(t)).collect()
    };
    let label = SemanticLabel {
        sample_id: input.sample_id,
        category: fusion.category.clone(),
        traces: fusion.traces.clone(),
        evidence,
        provenance: fusion.provenance,
    };
    let review = fusion.needs_review.then(|| RelabelReviewItem {
        sample_id: input.sample_id,
        image_path: input.image_path.to_string(),
        coarse_label: input.coarse.clone(),
        global_category: global.category.clone(),
        local_category: local.category.clone(),
        global_traces: global.traces.clone(),
        local_traces: local.traces.clone(),
        evidence: space.positive_traces().flat_map(|t| proposal.evidence_for(t)).collect(),
        round: input.round,
    });
    Ok(RelabelOutcome { label, proposal, raw_proposal: raw, review })
}

/// Subject cells plus every cell carrying a real trace, for the local call.
fn local_regions(proposal: &ProposerOutput, grids: &[RegionGrid]) -> Vec<RegionRef> {
    let mut regions = Vec::new();
    for (flags, grid) in proposal.grids.iter().zip(grids) {
        for (i, bbox) in grid.boxes.iter().enumerate() {
            let flagged = !flags.flags[i].contains(NO_TRACE);
            if flags.subject.contains(&i) {
                regions.push(RegionRef { granularity: grid.granularity, index: i, role: RegionRole::Subject, bbox: *bbox });
            }
            if flagged {
                regions.push(RegionRef { granularity: grid.granularity, index: i, role: RegionRole::Flagged, bbox: *bbox });
            }
        }
    }
    regions
}
