//! Project configuration, stored as `config.toml` in the project root.
//!
//! Every key has a default; unknown keys are rejected so typos surface
//! instead of silently falling back.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{ExpertId, Thresholds, VoteParams};
use crate::error::{Error, Result};
use crate::filter::{FusionWeights, HdbscanParams, TriageThresholds};
use crate::model::{ClassDef, ClassId, LabelSpace};
use crate::revlm::{Granularity, RelabelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub project: ProjectSection,
    pub labels: LabelsSection,
    pub filter: FilterSection,
    pub distill: DistillSection,
    pub relabel: RelabelSection,
    pub rounds: RoundsSection,
    pub metrics: MetricsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            project: ProjectSection::default(),
            labels: LabelsSection::default(),
            filter: FilterSection::default(),
            distill: DistillSection::default(),
            relabel: RelabelSection::default(),
            rounds: RoundsSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectSection {
    /// Root of every derived seed.
    pub rng_seed: u64,
    /// `http://host:port`, `mock://`, or `synthetic://<seed>`.
    pub sidecar_endpoint: String,
    pub sidecar_timeout_secs: u64,
    pub sidecar_retries: u32,
    /// Description prompt used before any triage feedback.
    pub initial_prompt: String,
    pub keywords_per_channel: usize,
    pub langs: Vec<String>,
    /// Optional lexicon TSV for multilingual keyword expansion, relative to the project.
    pub lexicon: Option<String>,
}

impl Default for ProjectSection {
    fn default() -> Self {
        ProjectSection {
            rng_seed: 0,
            sidecar_endpoint: "http://127.0.0.1:8765".into(),
            sidecar_timeout_secs: 60,
            sidecar_retries: 3,
            initial_prompt: "Describe the visible objects, materials and any signs of water damage.".into(),
            keywords_per_channel: 20,
            langs: vec!["en".into()],
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelsSection {
    pub classes: Vec<ClassDef>,
    pub noise_class: ClassId,
    pub traces: Vec<String>,
}

impl Default for LabelsSection {
    fn default() -> Self {
        let classes = [
            ("seat_belt", "seat belt"),
            ("seat_track", "seat track"),
            ("wiring_harness", "wiring harness"),
            ("spare_tire_well", "spare tire well"),
            ("foam_padding", "foam padding"),
            ("power_outlet_12v", "12V power outlet"),
            ("steering_column", "steering column"),
            ("noise", "noise"),
        ]
        .into_iter()
        .map(|(id, name)| ClassDef { id: id.into(), name: name.into(), description: String::new() })
        .collect();
        LabelsSection {
            classes,
            noise_class: "noise".into(),
            traces: ["rust", "dust and sand", "mold", "aged", "none"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub weights: FusionWeights,
    pub tau_mm: f64,
    pub n_per: usize,
    pub strong_min: f64,
    pub discard_max: f64,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub exemplars_per_bucket: usize,
    pub max_rounds: u32,
}

impl Default for FilterSection {
    fn default() -> Self {
        let t = TriageThresholds::default();
        let h = HdbscanParams::default();
        FilterSection {
            weights: FusionWeights::default(),
            tau_mm: 0.4,
            n_per: 5,
            strong_min: t.strong_min,
            discard_max: t.discard_max,
            min_cluster_size: h.min_cluster_size,
            min_samples: h.min_samples,
            exemplars_per_bucket: 3,
            max_rounds: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub k: usize,
    pub temperature: f64,
    pub theta_topic: f64,
    pub theta_label: f64,
    pub topic_conf_expert: ExpertId,
    pub alpha: f64,
    pub k_l: usize,
    pub k_h: usize,
    /// Cap on escalations per round as a fraction of the pool; unset means unlimited.
    pub escalation_budget: Option<f64>,
    pub max_rounds: u32,
}

impl Default for DistillSection {
    fn default() -> Self {
        let v = VoteParams::default();
        DistillSection {
            k: v.k,
            temperature: v.temperature,
            theta_topic: v.thresholds.topic,
            theta_label: v.thresholds.label,
            topic_conf_expert: v.topic_expert,
            alpha: 0.2,
            k_l: 3,
            k_h: 3,
            escalation_budget: None,
            max_rounds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelSection {
    pub region_support_min: usize,
    pub granularities: Vec<Granularity>,
    pub single_grid_classes: Vec<ClassId>,
    /// Concurrent samples in flight against the VLM.
    pub max_in_flight: usize,
}

impl Default for RelabelSection {
    fn default() -> Self {
        RelabelSection { region_support_min: 2, granularities: Granularity::ALL.to_vec(), single_grid_classes: Vec::new(), max_in_flight: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundsSection {
    /// Stop a stage once `|Δaccepted| / pool` stays below this for two rounds; 0 disables.
    pub plateau_epsilon: f64,
}

impl Default for RoundsSection {
    fn default() -> Self {
        RoundsSection { plateau_epsilon: 0.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Synonym TSV for semantic matching, relative to the project; unset uses the built-in table.
    pub synonyms: Option<String>,
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(v.is_finite() && lo <= v && v <= hi) {
        return Err(Error::Config(format!("{name} = {v} is outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.label_space()?;
        self.filter.weights.validate()?;
        let f = &self.filter;
        in_range("filter.tau_mm", f.tau_mm, -1.0, 1.0)?;
        self.triage_thresholds().validate()?;
        if f.n_per == 0 {
            return Err(Error::Config("filter.n_per must be at least 1".into()));
        }
        if f.min_cluster_size < 2 || f.min_samples == 0 {
            return Err(Error::Config("filter.min_cluster_size must be >= 2 and filter.min_samples >= 1".into()));
        }
        let d = &self.distill;
        if d.k == 0 {
            return Err(Error::Config("distill.k must be at least 1".into()));
        }
        if !(d.temperature.is_finite() && d.temperature > 0.0) {
            return Err(Error::Config(format!("distill.temperature = {} must be positive", d.temperature)));
        }
        in_range("distill.theta_topic", d.theta_topic, -1.0, 1.0)?;
        in_range("distill.theta_label", d.theta_label, -1.0, 1.0)?;
        if !(d.alpha > 0.0 && d.alpha <= 1.0) {
            return Err(Error::Config(format!("distill.alpha = {} is outside (0, 1]", d.alpha)));
        }
        if let Some(b) = d.escalation_budget {
            in_range("distill.escalation_budget", b, 0.0, 1.0)?;
        }
        if self.relabel.region_support_min == 0 {
            return Err(Error::Config("relabel.region_support_min must be at least 1".into()));
        }
        if self.relabel.granularities.is_empty() {
            return Err(Error::Config("relabel.granularities is empty".into()));
        }
        if self.relabel.max_in_flight == 0 {
            return Err(Error::Config("relabel.max_in_flight must be at least 1".into()));
        }
        let space = self.label_space()?;
        for c in &self.relabel.single_grid_classes {
            space.require(c).map_err(|_| Error::Config(format!("relabel.single_grid_classes names unknown class {c}")))?;
        }
        in_range("rounds.plateau_epsilon", self.rounds.plateau_epsilon, 0.0, 1.0)?;
        if self.project.langs.is_empty() {
            return Err(Error::Config("project.langs is empty".into()));
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.labels.classes.clone(), self.labels.noise_class.clone(), self.labels.traces.clone())
    }

    pub fn triage_thresholds(&self) -> TriageThresholds {
        TriageThresholds { strong_min: self.filter.strong_min, discard_max: self.filter.discard_max }
    }

    pub fn hdbscan(&self) -> HdbscanParams {
        HdbscanParams { min_cluster_size: self.filter.min_cluster_size, min_samples: self.filter.min_samples }
    }

    pub fn vote_params(&self) -> VoteParams {
        let d = &self.distill;
        VoteParams {
            k: d.k,
            temperature: d.temperature,
            thresholds: Thresholds { topic: d.theta_topic, label: d.theta_label },
            topic_expert: d.topic_conf_expert,
        }
    }

    pub fn relabel_params(&self) -> RelabelParams {
        RelabelParams {
            region_support_min: self.relabel.region_support_min,
            granularities: self.relabel.granularities.clone(),
            single_grid_classes: self.relabel.single_grid_classes.iter().cloned().collect::<BTreeSet<_>>(),
        }
    }

    /// First 8 bytes of the SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<u64> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = PipelineConfig::default();
        assert_eq!(c.filter.tau_mm, 0.4);
        assert_eq!(c.filter.n_per, 5);
        assert_eq!((c.filter.weights.img_desc, c.filter.weights.desc_kw, c.filter.weights.img_kw), (0.5, 0.3, 0.2));
        assert_eq!(c.distill.k, 7);
        assert_eq!((c.distill.theta_topic, c.distill.theta_label), (0.65, 0.45));
        assert_eq!(c.distill.alpha, 0.2);
        assert_eq!((c.distill.k_l, c.distill.k_h), (3, 3));
        assert_eq!((c.filter.max_rounds, c.distill.max_rounds), (12, 5));
        assert_eq!(c.labels.classes.len(), 8);
        assert_eq!(c.labels.traces, vec!["rust", "dust and sand", "mold", "aged", "none"]);
        assert_eq!(c.project.keywords_per_channel, 20);
        assert_eq!(c.relabel.region_support_min, 2);
        assert_eq!(c.distill.temperature, 0.07);
        assert_eq!(c.distill.topic_conf_expert, ExpertId::Clip);
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_and_partial_files() {
        let c = PipelineConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(PipelineConfig::parse(&text).unwrap(), c);
        let partial = PipelineConfig::parse("[distill]\nk = 3\n").unwrap();
        assert_eq!(partial.distill.k, 3);
        assert_eq!(partial.filter, FilterSection::default());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(PipelineConfig::parse("[distill]\nkk = 3\n").is_err());
        assert!(PipelineConfig::parse("[nope]\n").is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for bad in [
            "[filter]\nweights = { img_desc = 0.5, desc_kw = 0.5, img_kw = 0.5 }\n",
            "[distill]\nalpha = 0.0\n",
            "[distill]\ntheta_topic = 1.5\n",
            "[distill]\nescalation_budget = 2.0\n",
            "[filter]\nstrong_min = 0.1\n",
            "[labels]\nnoise_class = \"missing\"\n",
        ] {
            assert!(PipelineConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.distill.k = 5;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
