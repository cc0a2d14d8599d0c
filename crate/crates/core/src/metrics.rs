//! Curation quality against a human-verified reference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassId, SampleId, SampleStatus};

/// Category plus trace set, the unit of semantic comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticTruth {
    pub category: ClassId,
    pub traces: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReference {
    pub truth: BTreeMap<SampleId, ClassId>,
    /// true = verified clean, false = verified noisy.
    #[serde(default)]
    pub clean_flags: BTreeMap<SampleId, bool>,
    #[serde(default)]
    pub semantic_truth: Option<BTreeMap<SampleId, SemanticTruth>>,
}

impl EvalReference {
    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.clean_flags.keys().find(|id| !self.truth.contains_key(id)) {
            return Err(Error::Data(format!("clean flag for {id} has no reference label")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: EvalReference = crate::io::read_json(path)?;
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub class: ClassId,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub per_class: Vec<ClassPrf>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro precision, recall and F1. A reference sample without
/// a prediction is a false negative for its class; predictions for samples
/// outside the reference are ignored. A zero denominator contributes 0.
///
/// `classes` fixes the evaluated classes; otherwise the union of reference
/// and predicted labels is used, in sorted order.
pub fn macro_prf(predictions: &BTreeMap<SampleId, ClassId>, truth: &BTreeMap<SampleId, ClassId>, classes: Option<&[ClassId]>) -> PrfReport {
    let classes: Vec<ClassId> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut all: BTreeSet<&ClassId> = truth.values().collect();
            all.extend(predictions.iter().filter(|(id, _)| truth.contains_key(id)).map(|(_, c)| c));
            all.into_iter().cloned().collect()
        }
    };
    let mut counts: BTreeMap<&ClassId, [usize; 3]> = classes.iter().map(|c| (c, [0; 3])).collect();
    for (id, t) in truth {
        match predictions.get(id) {
            Some(p) if p == t => {
                if let Some(c) = counts.get_mut(t) {
                    c[0] += 1;
                }
            }
            Some(p) => {
                if let Some(c) = counts.get_mut(p) {
                    c[1] += 1;
                }
                if let Some(c) = counts.get_mut(t) {
                    c[2] += 1;
                }
            }
            None => {
                if let Some(c) = counts.get_mut(t) {
                    c[2] += 1;
                }
            }
        }
    }
    let per_class: Vec<ClassPrf> = classes
        .iter()
        .map(|class| {
            let [tp, fp, fn_] = counts[class];
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassPrf { class: class.clone(), tp, fp, fn_, precision, recall, f1 }
        })
        .collect();
    let mean = |f: fn(&ClassPrf) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    PrfReport { macro_precision: mean(|c| c.precision), macro_recall: mean(|c| c.recall), macro_f1: mean(|c| c.f1), per_class }
}

/// Reference rows × predicted columns; the last column counts reference
/// samples with no prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<ClassId>,
    pub counts: Vec<Vec<usize>>,
}

pub fn confusion_matrix(predictions: &BTreeMap<SampleId, ClassId>, truth: &BTreeMap<SampleId, ClassId>, classes: &[ClassId]) -> ConfusionMatrix {
    let pos: BTreeMap<&ClassId, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let mut counts = vec![vec![0; classes.len() + 1]; classes.len()];
    for (id, t) in truth {
        let Some(&row) = pos.get(t) else { continue };
        let col = match predictions.get(id) {
            Some(p) => match pos.get(p) {
                Some(&c) => c,
                None => continue,
            },
            None => classes.len(),
        };
        counts[row][col] += 1;
    }
    ConfusionMatrix { classes: classes.to_vec(), counts }
}

impl ConfusionMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\predicted");
        for c in &self.classes {
            out.push(',');
            out.push_str(&csv_field(c.as_str()));
        }
        out.push_str(",(none)\n");
        for (c, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(&csv_field(c.as_str()));
            for n in row {
                let _ = write!(out, ",{n}");
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    /// Absent when the reference has no noisy samples.
    pub nrr: Option<f64>,
    /// Absent when the reference has no clean samples.
    pub cdrr: Option<f64>,
    pub noisy: usize,
    pub noisy_removed: usize,
    pub clean: usize,
    pub clean_kept: usize,
}

/// Removed means discarded or filtered as low-similarity; kept means
/// committed. Samples still in flight or missing count as neither.
pub fn nrr_cdrr(final_statuses: &BTreeMap<SampleId, SampleStatus>, reference: &EvalReference) -> RetentionReport {
    let (mut noisy, mut noisy_removed, mut clean, mut clean_kept) = (0, 0, 0, 0);
    for (id, &is_clean) in &reference.clean_flags {
        let status = final_statuses.get(id);
        if is_clean {
            clean += 1;
            clean_kept += (status == Some(&SampleStatus::Committed)) as usize;
        } else {
            noisy += 1;
            noisy_removed += matches!(status, Some(SampleStatus::Discarded | SampleStatus::LowSim)) as usize;
        }
    }
    RetentionReport {
        nrr: (noisy > 0).then(|| ratio(noisy_removed, noisy)),
        cdrr: (clean > 0).then(|| ratio(clean_kept, clean)),
        noisy,
        noisy_removed,
        clean,
        clean_kept,
    }
}

/// Variant → canonical term, applied to categories and traces after case
/// folding and whitespace collapsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymTable(BTreeMap<String, String>);

impl Default for SynonymTable {
    fn default() -> Self {
        SynonymTable::from_pairs([("whitish", "white"), ("cap", "umbrella-shaped")])
    }
}

fn fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl SynonymTable {
    pub fn empty() -> Self {
        SynonymTable(BTreeMap::new())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        SynonymTable(pairs.into_iter().map(|(v, c)| (fold(v), fold(c))).collect())
    }

    /// `variant<TAB>canonical` per line; blank lines and `#` comments skipped.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((v, c)) = line.split_once('\t') else {
                return Err(Error::Parse(format!("synonym line {}: expected variant<TAB>canonical", n + 1)));
            };
            map.insert(fold(v), fold(c));
        }
        Ok(SynonymTable(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }

    pub fn normalize(&self, term: &str) -> String {
        let f = fold(term);
        self.0.get(&f).cloned().unwrap_or(f)
    }

    fn normalize_label(&self, label: &SemanticTruth) -> (String, BTreeSet<String>) {
        (self.normalize(label.category.as_str()), label.traces.iter().map(|t| self.normalize(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    /// Samples present in both maps.
    pub evaluated: usize,
    pub perfect: usize,
    /// perfect / evaluated, 0 when nothing overlaps.
    pub perfect_match: f64,
    /// Mean over traces of per-trace recall; traces absent from the truth are skipped.
    pub trace_macro_recall: f64,
    /// Fraction of samples whose predicted traces cover every true trace.
    pub sample_recall: f64,
}

/// Strict semantic agreement: category and the full trace set must match
/// after synonym normalization.
pub fn perfect_match(semantic: &BTreeMap<SampleId, SemanticTruth>, truth: &BTreeMap<SampleId, SemanticTruth>, synonyms: &SynonymTable) -> SemanticReport {
    let mut evaluated = 0;
    let mut perfect = 0;
    let mut covered = 0;
    let mut per_trace: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (id, t) in truth {
        let Some(p) = semantic.get(id) else { continue };
        evaluated += 1;
        let (tc, tt) = synonyms.normalize_label(t);
        let (pc, pt) = synonyms.normalize_label(p);
        perfect += (tc == pc && tt == pt) as usize;
        covered += tt.is_subset(&pt) as usize;
        for trace in &tt {
            let e = per_trace.entry(trace.clone()).or_default();
            e.0 += pt.contains(trace) as usize;
            e.1 += 1;
        }
    }
    let trace_macro_recall = if per_trace.is_empty() {
        0.0
    } else {
        per_trace.values().map(|&(hit, n)| ratio(hit, n)).sum::<f64>() / per_trace.len() as f64
    };
    SemanticReport {
        evaluated,
        perfect,
        perfect_match: ratio(perfect, evaluated),
        trace_macro_recall,
        sample_recall: ratio(covered, evaluated),
    }
}

/// Everything `metrics` prints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classification: PrfReport,
    pub retention: RetentionReport,
    pub semantic: Option<SemanticReport>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}", "class", "precision", "recall", "f1", "tp", "fp", "fn");
        for c in &self.classification.per_class {
            let _ = writeln!(out, "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}", c.class.as_str(), c.precision, c.recall, c.f1, c.tp, c.fp, c.fn_);
        }
        let m = &self.classification;
        let _ = writeln!(out, "{:<24} {:>9.4} {:>9.4} {:>9.4}", "macro", m.macro_precision, m.macro_recall, m.macro_f1);
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let r = &self.retention;
        let _ = writeln!(out, "NRR  {} ({}/{} noisy removed)", opt(r.nrr), r.noisy_removed, r.noisy);
        let _ = writeln!(out, "CDRR {} ({}/{} clean kept)", opt(r.cdrr), r.clean_kept, r.clean);
        if let Some(s) = &self.semantic {
            let _ = writeln!(out, "perfect match {:.4} ({}/{})", s.perfect_match, s.perfect, s.evaluated);
            let _ = writeln!(out, "trace macro recall {:.4}", s.trace_macro_recall);
            let _ = writeln!(out, "sample trace recall {:.4}", s.sample_recall);
        }
        out
    }
}
