//! Synthetic curation world for hermetic end-to-end runs.
//!
//! Each clean sample is a Gaussian perturbation of its class centre in a
//! small latent space; noise samples are uniform random directions. Every
//! encoder sees the latent through its own orthonormal embedding plus
//! per-sample jitter, so the experts agree most of the time without being
//! identical. [`SyntheticSidecar`] answers embedding and VLM calls from the
//! world, and [`Oracle`] plays the human annotator with ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::slugify;
use crate::error::{Error, Result};
use crate::metrics::{EvalReference, SemanticTruth};
use crate::model::{
    AnnotationReason, AnnotationRecord, ClassDef, ClassId, EmbeddingExpert, EmbeddingVector, LabelSpace, SampleId, NO_TRACE,
};
use crate::rng::{derive_seed, seeded_rng};
use crate::sidecar::mock::hashed_unit_vector;
use crate::sidecar::protocol::{
    BoxFlags, DescribeRequest, ExpandKeywordsRequest, GridProposal, Op, ProposeRequest, ProposeResponse, ValidateMode,
    ValidateRequest, ValidateResponse,
};
use crate::sidecar::{Embedder, SidecarError, SidecarResult, VlmClient};

pub const NOISE_CLASS: &str = "noise";
const DESCRIPTION_PREFIX: &str = "synthetic sample ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub seed: u64,
    pub n_classes: usize,
    pub per_class: usize,
    /// Fraction of all samples that are noise.
    pub noise_fraction: f64,
    pub latent_dim: usize,
    /// Norm of the within-class perturbation relative to the unit centre.
    pub spread: f64,
    /// Norm of the per-encoder jitter relative to the projected latent.
    pub jitter: f64,
    pub seeds_per_class: usize,
    pub noise_seeds: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            seed: 0,
            n_classes: 3,
            per_class: 100,
            noise_fraction: 0.3,
            latent_dim: 32,
            spread: 0.45,
            jitter: 0.3,
            seeds_per_class: 10,
            noise_seeds: 10,
        }
    }
}

impl WorldParams {
    /// Parse `synthetic://<seed>[?key=value&...]`.
    pub fn from_endpoint(endpoint: &str) -> Result<Self> {
        let rest = endpoint
            .strip_prefix("synthetic://")
            .ok_or_else(|| Error::Config(format!("not a synthetic endpoint: {endpoint}")))?;
        let (seed, query) = rest.split_once('?').unwrap_or((rest, ""));
        let mut p = WorldParams::default();
        if !seed.is_empty() {
            p.seed = seed.parse().map_err(|_| Error::Config(format!("bad synthetic seed {seed:?}")))?;
        }
        for pair in query.split('&').filter(|s| !s.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("bad synthetic option {pair:?}")))?;
            let bad = || Error::Config(format!("bad value for synthetic option {k}: {v:?}"));
            match k {
                "classes" => p.n_classes = v.parse().map_err(|_| bad())?,
                "per_class" => p.per_class = v.parse().map_err(|_| bad())?,
                "noise" => p.noise_fraction = v.parse().map_err(|_| bad())?,
                "spread" => p.spread = v.parse().map_err(|_| bad())?,
                "jitter" => p.jitter = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown synthetic option {k}"))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.per_class == 0 || self.latent_dim < 2 {
            return Err(Error::Config("synthetic world needs classes, samples and a latent dimension".into()));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::Config(format!("noise fraction {} outside [0, 1)", self.noise_fraction)));
        }
        if self.seeds_per_class > self.per_class {
            return Err(Error::Config("more seeds than samples per class".into()));
        }
        Ok(())
    }

    pub fn n_noise(&self) -> usize {
        let clean = (self.n_classes * self.per_class) as f64;
        (clean * self.noise_fraction / (1.0 - self.noise_fraction)).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSample {
    pub id: SampleId,
    /// Ground-truth class; the noise class for noise samples.
    pub class: ClassId,
    pub clean: bool,
    /// Crawl keyword the sample was found under.
    pub keyword: String,
    pub image: Vec<u8>,
    pub traces: BTreeSet<String>,
    latent: Vec<f64>,
}

#[derive(Debug)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub space: LabelSpace,
    pub samples: Vec<WorldSample>,
    centers: Vec<Vec<f64>>,
    /// Column-major orthonormal embeddings, one per encoder.
    projections: BTreeMap<EmbeddingExpert, Vec<Vec<f64>>>,
    by_id: HashMap<SampleId, usize>,
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= n;
    }
}

/// `dim × k` matrix with orthonormal columns, by Gram-Schmidt.
fn orthonormal_columns(rng: &mut impl Rng, dim: usize, k: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v = gaussian(rng, dim);
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= d * y;
            }
        }
        normalize(&mut v);
        cols.push(v);
    }
    cols
}

fn tiny_png(rng: &mut impl RngCore) -> Vec<u8> {
    let mut px = [0u8; 16 * 12 * 3];
    rng.fill_bytes(&mut px);
    let img = image::RgbImage::from_raw(16, 12, px.to_vec()).expect("buffer matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encoding to memory");
    out.into_inner()
}

pub fn class_keyword(class: &ClassId) -> String {
    format!("class {class}")
}

impl SyntheticWorld {
    pub fn generate(params: &WorldParams) -> Result<Self> {
        params.validate()?;
        let d = params.latent_dim;
        let mut classes: Vec<ClassDef> = (0..params.n_classes)
            .map(|i| ClassDef { id: ClassId(format!("c{i}")), name: format!("class {i}"), description: format!("synthetic class {i}") })
            .collect();
        classes.push(ClassDef { id: NOISE_CLASS.into(), name: "noise".into(), description: "off-topic images".into() });
        let traces: Vec<String> = ["rust", "dust and sand", "mold", "aged", NO_TRACE].map(String::from).to_vec();
        let space = LabelSpace::new(classes, NOISE_CLASS.into(), traces)?;

        let mut rng = seeded_rng(derive_seed(params.seed, "synthetic-centers"));
        let centers: Vec<Vec<f64>> = (0..params.n_classes)
            .map(|_| {
                let mut c = gaussian(&mut rng, d);
                normalize(&mut c);
                c
            })
            .collect();
        let mut projections = BTreeMap::new();
        for e in EmbeddingExpert::ALL {
            if e == EmbeddingExpert::ClipText {
                continue;
            }
            let mut prng = seeded_rng(derive_seed(params.seed, &format!("synthetic-projection-{e}")));
            projections.insert(e, orthonormal_columns(&mut prng, e.dim(), d));
        }

        let positive: Vec<String> = space.positive_traces().cloned().collect();
        let mut rng = seeded_rng(derive_seed(params.seed, "synthetic-samples"));
        let mut samples = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            let class = space.class(c).clone();
            for _ in 0..params.per_class {
                let g = gaussian(&mut rng, d);
                let scale = params.spread / (d as f64).sqrt();
                let latent: Vec<f64> = center.iter().zip(&g).map(|(m, z)| m + scale * z).collect();
                let n_traces = rng.random_range(0..=2);
                let traces = positive.choose_multiple(&mut rng, n_traces).cloned().collect();
                samples.push(WorldSample {
                    id: SampleId::from_raw([0; 16]),
                    keyword: class_keyword(&class),
                    class: class.clone(),
                    clean: true,
                    image: Vec::new(),
                    traces,
                    latent,
                });
            }
        }
        for _ in 0..params.n_noise() {
            let latent = gaussian(&mut rng, d);
            let crawled = space.class(rng.random_range(0..params.n_classes)).clone();
            samples.push(WorldSample {
                id: SampleId::from_raw([0; 16]),
                keyword: class_keyword(&crawled),
                class: NOISE_CLASS.into(),
                clean: false,
                image: Vec::new(),
                traces: BTreeSet::new(),
                latent,
            });
        }
        let mut img_rng = seeded_rng(derive_seed(params.seed, "synthetic-images"));
        let mut by_id = HashMap::new();
        for (i, s) in samples.iter_mut().enumerate() {
            s.image = tiny_png(&mut img_rng);
            s.id = SampleId::from_content(&s.image);
            if by_id.insert(s.id, i).is_some() {
                return Err(Error::Data("synthetic image collision".into()));
            }
        }
        Ok(SyntheticWorld { params: params.clone(), space, samples, centers, projections, by_id })
    }

    pub fn sample(&self, id: &SampleId) -> Option<&WorldSample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    fn project(&self, expert: EmbeddingExpert, latent: &[f64], jitter_label: &str) -> EmbeddingVector {
        let proj_expert = if expert == EmbeddingExpert::ClipText { EmbeddingExpert::ClipImage } else { expert };
        let cols = &self.projections[&proj_expert];
        let mut unit = latent.to_vec();
        normalize(&mut unit);
        let mut out = vec![0.0f64; expert.dim()];
        for (col, w) in cols.iter().zip(&unit) {
            for (o, c) in out.iter_mut().zip(col) {
                *o += w * c;
            }
        }
        if self.params.jitter > 0.0 {
            let mut rng = seeded_rng(derive_seed(self.params.seed, jitter_label));
            let mut h = gaussian(&mut rng, expert.dim());
            normalize(&mut h);
            for (o, x) in out.iter_mut().zip(&h) {
                *o += self.params.jitter * x;
            }
        }
        EmbeddingVector::normalized(expert, out.into_iter().map(|x| x as f32).collect()).expect("projection is non-zero")
    }

    /// Image embedding of a world sample as seen by `expert`.
    pub fn image_vector(&self, s: &WorldSample, expert: EmbeddingExpert) -> EmbeddingVector {
        self.project(expert, &s.latent, &format!("jitter-{expert}-{}", s.id))
    }

    pub fn description(&self, s: &WorldSample) -> String {
        format!("{DESCRIPTION_PREFIX}{}", s.id)
    }

    fn text_vector(&self, text: &str) -> EmbeddingVector {
        if let Some(hex) = text.strip_prefix(DESCRIPTION_PREFIX) {
            if let Some(s) = hex.parse::<SampleId>().ok().and_then(|id| self.sample(&id)) {
                return self.project(EmbeddingExpert::ClipText, &s.latent, &format!("jitter-text-{}", s.id));
            }
        }
        for (c, center) in self.centers.iter().enumerate() {
            if text == class_keyword(self.space.class(c)) {
                return self.project(EmbeddingExpert::ClipText, center, &format!("jitter-keyword-{c}"));
            }
        }
        hashed_unit_vector(EmbeddingExpert::ClipText, text.as_bytes())
    }

    /// Seed annotations: the first clean samples of each class plus the
    /// first noise samples, labeled in round 0.
    pub fn seed_annotations(&self) -> Vec<AnnotationRecord> {
        let mut out = Vec::new();
        for class in self.space.class_ids() {
            let n = if self.space.is_noise(class) { self.params.noise_seeds } else { self.params.seeds_per_class };
            out.extend(self.samples.iter().filter(|s| &s.class == class).take(n).map(|s| AnnotationRecord {
                sample_id: s.id,
                label: s.class.clone(),
                annotator: "oracle".into(),
                round: 0,
                reason: AnnotationReason::Seed,
            }));
        }
        out
    }

    pub fn reference(&self) -> EvalReference {
        EvalReference {
            truth: self.samples.iter().map(|s| (s.id, s.class.clone())).collect(),
            clean_flags: self.samples.iter().map(|s| (s.id, s.clean)).collect(),
            semantic_truth: Some(
                self.samples
                    .iter()
                    .filter(|s| s.clean)
                    .map(|s| (s.id, SemanticTruth { category: s.class.clone(), traces: s.traces.clone() }))
                    .collect(),
            ),
        }
    }

    /// Lay the images out as a directory-fetcher tree `<root>/<keyword-slug>/<n>.png`.
    pub fn write_fetch_tree(&self, root: &Path) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let dir = root.join(slugify(&s.keyword));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let p = dir.join(format!("{i:05}.png"));
            fs::write(&p, &s.image).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Sidecar that answers from a [`SyntheticWorld`].
#[derive(Debug, Clone)]
pub struct SyntheticSidecar {
    world: Arc<SyntheticWorld>,
}

impl SyntheticSidecar {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        SyntheticSidecar { world }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn lookup(&self, op: Op, image: &[u8]) -> SidecarResult<&WorldSample> {
        let id = SampleId::from_content(image);
        self.world
            .sample(&id)
            .ok_or_else(|| SidecarError::Schema { op, message: format!("image {id} is not part of the synthetic world") })
    }
}

impl Embedder for SyntheticSidecar {
    fn embed_image(&self, expert: EmbeddingExpert, image: &[u8]) -> SidecarResult<EmbeddingVector> {
        match self.world.sample(&SampleId::from_content(image)) {
            Some(s) => Ok(self.world.image_vector(s, expert)),
            None => Ok(hashed_unit_vector(expert, image)),
        }
    }

    fn embed_text(&self, text: &str) -> SidecarResult<EmbeddingVector> {
        Ok(self.world.text_vector(text))
    }
}

impl VlmClient for SyntheticSidecar {
    fn describe(&self, req: &DescribeRequest) -> SidecarResult<String> {
        let s = self.lookup(Op::Describe, &req.image)?;
        Ok(self.world.description(s))
    }

    fn expand_keywords(&self, req: &ExpandKeywordsRequest) -> SidecarResult<Vec<String>> {
        let base = class_keyword(&req.category);
        let mut out = vec![base.clone()];
        out.extend((1..req.count).map(|i| format!("{base} variant {i}")));
        Ok(out)
    }

    /// Subject is every cell; each true trace is flagged on the first two
    /// cells of every grid.
    fn propose(&self, req: &ProposeRequest) -> SidecarResult<ProposeResponse> {
        let s = self.lookup(Op::Propose, &req.image)?;
        let grids = req
            .grids
            .iter()
            .map(|g| {
                let flags = (0..g.boxes.len())
                    .map(|index| {
                        let traces: Vec<String> = if index < 2 && !s.traces.is_empty() {
                            s.traces.iter().cloned().collect()
                        } else {
                            vec![NO_TRACE.to_string()]
                        };
                        BoxFlags { index, traces }
                    })
                    .collect();
                GridProposal { granularity: g.granularity, subject: (0..g.boxes.len()).collect(), flags }
            })
            .collect();
        Ok(ProposeResponse { grids })
    }

    /// The region view always sees the true label. The whole-image view
    /// misses the traces of every fifth clean sample, which the region
    /// evidence then recovers.
    fn validate(&self, req: &ValidateRequest) -> SidecarResult<ValidateResponse> {
        let s = self.lookup(Op::Validate, &req.image)?;
        let misses = req.mode == ValidateMode::Global && s.id.as_bytes()[0] % 5 == 0;
        let traces: Vec<String> = if s.traces.is_empty() || misses {
            vec![NO_TRACE.to_string()]
        } else {
            s.traces.iter().cloned().collect()
        };
        Ok(ValidateResponse { category: s.class.clone(), traces })
    }

    fn revise_prompt(&self, prompt: &str, feedback: &str) -> SidecarResult<String> {
        let sections = feedback.lines().filter(|l| l.starts_with("## ")).count();
        Ok(format!("{prompt} (revised from {sections} feedback sections)"))
    }
}

/// Ground-truth annotator.
#[derive(Debug, Clone)]
pub struct Oracle {
    world: Arc<SyntheticWorld>,
}

impl Oracle {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        Oracle { world }
    }

    pub fn class_of(&self, id: &SampleId) -> Option<&ClassId> {
        self.world.sample(id).map(|s| &s.class)
    }

    /// 1 for clean samples, 0 for noise and unknown ids.
    pub fn relevance(&self, id: &SampleId) -> u8 {
        self.world.sample(id).is_some_and(|s| s.clean) as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dot;

    fn world() -> SyntheticWorld {
        SyntheticWorld::generate(&WorldParams { seed: 3, per_class: 30, ..WorldParams::default() }).unwrap()
    }

    #[test]
    fn sizes_and_determinism() {
        let w = world();
        assert_eq!(w.samples.len(), 90 + w.params.n_noise());
        assert_eq!(w.params.n_noise(), 39);
        let again = world();
        assert!(w.samples.iter().zip(&again.samples).all(|(a, b)| a.id == b.id && a.traces == b.traces));
        let sc = SyntheticSidecar::new(Arc::new(again));
        let s = &w.samples[5];
        assert_eq!(sc.embed_image(EmbeddingExpert::Beit, &s.image).unwrap(), w.image_vector(s, EmbeddingExpert::Beit));
    }

    #[test]
    fn clean_samples_cluster_and_noise_does_not() {
        let w = world();
        let e = EmbeddingExpert::Dinov2;
        let v: Vec<EmbeddingVector> = w.samples.iter().map(|s| w.image_vector(s, e)).collect();
        let (mut same, mut ns, mut noise, mut nn) = (0.0, 0, 0.0, 0);
        for i in 0..w.samples.len() {
            for j in i + 1..w.samples.len() {
                let c = dot(v[i].data(), v[j].data());
                if w.samples[i].clean && w.samples[i].class == w.samples[j].class {
                    same += c;
                    ns += 1;
                } else if !w.samples[i].clean {
                    noise += c;
                    nn += 1;
                }
            }
        }
        assert!(same / ns as f64 > 0.65, "{}", same / ns as f64);
        assert!((noise / nn as f64).abs() < 0.1);
    }

    #[test]
    fn text_vectors_follow_the_image() {
        let w = world();
        let sc = SyntheticSidecar::new(Arc::new(world()));
        let s = &w.samples[0];
        let desc = sc.describe(&DescribeRequest { image: s.image.clone(), prompt: String::new() }).unwrap();
        let t = sc.embed_text(&desc).unwrap();
        let img = sc.embed_image(EmbeddingExpert::ClipImage, &s.image).unwrap();
        assert!(t.cosine(&img) > 0.8);
        let kw = sc.embed_text(&s.keyword).unwrap();
        assert!(kw.cosine(&img) > 0.6);
    }

    #[test]
    fn endpoint_parsing() {
        let p = WorldParams::from_endpoint("synthetic://7?per_class=20&noise=0.25").unwrap();
        assert_eq!((p.seed, p.per_class, p.noise_fraction), (7, 20, 0.25));
        assert_eq!(WorldParams::from_endpoint("synthetic://").unwrap().seed, 0);
        assert!(WorldParams::from_endpoint("synthetic://x").is_err());
        assert!(WorldParams::from_endpoint("synthetic://1?bogus=1").is_err());
    }

    #[test]
    fn seeds_and_reference() {
        let w = world();
        let seeds = w.seed_annotations();
        assert_eq!(seeds.len(), 3 * 10 + 10);
        let r = w.reference();
        assert_eq!(r.truth.len(), w.samples.len());
        assert_eq!(r.clean_flags.values().filter(|c| !**c).count(), 39);
    }
}
