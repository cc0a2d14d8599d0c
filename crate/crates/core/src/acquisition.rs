//! Crawl keyword corpus construction and crawl-result ingestion.
//!
//! The corpus is the multilingual expansion of the union of two keyword
//! channels: one generated by the VLM from seed images plus the category
//! prompt, one from the prompt alone. Live crawling is behind [`Fetcher`];
//! [`DirectoryFetcher`] reads a local folder tree so runs work offline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassId, Sample, SampleId, SampleStatus};
use crate::sidecar::{ExpandKeywordsRequest, KeywordChannel, VlmClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordSource {
    VlmVisual,
    TextOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeywordEntry {
    pub lang: String,
    pub text: String,
    pub source: KeywordSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordCorpus {
    pub category: ClassId,
    pub entries: Vec<KeywordEntry>,
}

/// Multilingual expansion of a single term.
pub trait Lexicon: Send + Sync {
    /// Variants of `term` in `lang`; may be empty.
    fn translate(&self, term: &str, lang: &str) -> Vec<String>;
}

/// Passes every term through unchanged in every language.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityLexicon;

impl Lexicon for IdentityLexicon {
    fn translate(&self, term: &str, _lang: &str) -> Vec<String> {
        vec![term.to_string()]
    }
}

/// Table-driven lexicon loaded from `term<TAB>lang<TAB>translation` lines.
/// Terms without a row for a language pass through unchanged.
#[derive(Debug, Clone, Default)]
pub struct TableLexicon {
    table: BTreeMap<(String, String), Vec<String>>,
}

impl TableLexicon {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 || cols.iter().any(|c| c.trim().is_empty()) {
                return Err(Error::Parse(format!(
                    "lexicon line {}: expected term<TAB>lang<TAB>translation",
                    lineno + 1
                )));
            }
            table
                .entry((normalize_key(cols[0]), cols[1].trim().to_string()))
                .or_default()
                .push(cols[2].trim().to_string());
        }
        Ok(TableLexicon { table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl Lexicon for TableLexicon {
    fn translate(&self, term: &str, lang: &str) -> Vec<String> {
        match self.table.get(&(normalize_key(term), lang.to_string())) {
            Some(list) => list.clone(),
            None => vec![term.to_string()],
        }
    }
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Dedup key: case-folded, whitespace-normalized text.
fn normalize_key(s: &str) -> String {
    normalize_whitespace(s).to_lowercase()
}

/// Seed image for the visual keyword channel.
#[derive(Debug, Clone)]
pub struct SeedImage {
    pub id: SampleId,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ExpandRequest<'a> {
    pub category: ClassId,
    pub seeds: &'a [SeedImage],
    pub prompt: &'a str,
    pub langs: &'a [String],
    pub keywords_per_channel: usize,
}

/// Build `dedup(lexicon(K_T ∪ K_V))` for one category.
pub fn expand_keywords(req: &ExpandRequest<'_>, vlm: &dyn VlmClient, lexicon: &dyn Lexicon) -> Result<KeywordCorpus> {
    if req.seeds.is_empty() && req.prompt.trim().is_empty() {
        return Err(Error::Precondition("expand_keywords needs seed images or a category prompt".into()));
    }
    if req.langs.is_empty() {
        return Err(Error::Precondition("expand_keywords needs at least one language".into()));
    }
    // Canonical input order so the output does not depend on caller ordering.
    let mut seeds: Vec<&SeedImage> = req.seeds.iter().collect();
    seeds.sort_by_key(|s| s.id);
    seeds.dedup_by_key(|s| s.id);
    let langs: BTreeSet<&String> = req.langs.iter().collect();

    let mut channels = Vec::new();
    if !seeds.is_empty() {
        channels.push((KeywordChannel::Visual, KeywordSource::VlmVisual, seeds.iter().map(|s| s.bytes.clone()).collect()));
    }
    if !req.prompt.trim().is_empty() {
        channels.push((KeywordChannel::Text, KeywordSource::TextOnly, Vec::new()));
    }

    let mut failures = Vec::new();
    let mut terms: Vec<(String, KeywordSource)> = Vec::new();
    for (channel, source, images) in channels {
        let call = ExpandKeywordsRequest {
            channel,
            category: req.category.clone(),
            prompt: req.prompt.to_string(),
            images,
            count: req.keywords_per_channel,
        };
        match vlm.expand_keywords(&call) {
            Ok(list) => terms.extend(list.into_iter().map(|t| (t, source))),
            Err(e) => failures.push(format!("{}: {e}", source_name(source))),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Acquisition(format!("keyword channel(s) failed: {}", failures.join("; "))));
    }

    // (lang, key) → (text, source); ties keep the smallest text and the
    // visual source, independent of arrival order.
    let mut best: BTreeMap<(String, String), (String, KeywordSource)> = BTreeMap::new();
    for (term, source) in &terms {
        for lang in &langs {
            for variant in lexicon.translate(term, lang) {
                let text = normalize_whitespace(&variant);
                if text.is_empty() {
                    continue;
                }
                let key = ((*lang).clone(), text.to_lowercase());
                let candidate = (text, *source);
                best.entry(key)
                    .and_modify(|cur| {
                        if (candidate.1, &candidate.0) < (cur.1, &cur.0) {
                            *cur = candidate.clone();
                        }
                    })
                    .or_insert(candidate);
            }
        }
    }
    if best.is_empty() {
        return Err(Error::Acquisition("no keywords produced".into()));
    }
    let mut entries: Vec<KeywordEntry> = best
        .into_iter()
        .map(|((lang, _), (text, source))| KeywordEntry { lang, text, source })
        .collect();
    entries.sort();
    Ok(KeywordCorpus { category: req.category.clone(), entries })
}

fn source_name(s: KeywordSource) -> &'static str {
    match s {
        KeywordSource::VlmVisual => "vlm_visual",
        KeywordSource::TextOnly => "text_only",
    }
}

/// One fetched image with the query that found it.
#[derive(Debug, Clone)]
pub struct CrawlResult {
    pub bytes: Vec<u8>,
    pub keyword: String,
    pub lang: String,
}

/// Search-engine crawler interface.
pub trait Fetcher {
    fn fetch(&self, keyword: &KeywordEntry) -> Result<Vec<CrawlResult>>;
}

/// Reads `<root>/<keyword-slug>/*.{jpg,jpeg,png,webp}`.
#[derive(Debug, Clone)]
pub struct DirectoryFetcher {
    root: PathBuf,
    lang: String,
}

pub fn slugify(text: &str) -> String {
    let mut slug = String::new();
    for ch in text.trim().to_lowercase().chars() {
        if ch.is_alphanumeric() {
            slug.push(ch);
        } else if !slug.ends_with('-') {
            slug.push('-');
        }
    }
    slug.trim_matches('-').to_string()
}

fn keyword_from_slug(slug: &str) -> String {
    slug.split(['-', '_']).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
}

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "webp"];

impl DirectoryFetcher {
    pub fn new(root: impl Into<PathBuf>, lang: impl Into<String>) -> Self {
        DirectoryFetcher { root: root.into(), lang: lang.into() }
    }

    fn read_dir_images(&self, dir: &Path, keyword: &str) -> Result<Vec<CrawlResult>> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                Ok(CrawlResult { bytes, keyword: keyword.to_string(), lang: self.lang.clone() })
            })
            .collect()
    }

    /// Every keyword directory under the root, in name order.
    pub fn fetch_all(&self) -> Result<Vec<CrawlResult>> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(&self.root)
            .map_err(|e| Error::io(&self.root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut out = Vec::new();
        for dir in dirs {
            let slug = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            out.extend(self.read_dir_images(&dir, &keyword_from_slug(&slug))?);
        }
        Ok(out)
    }
}

impl Fetcher for DirectoryFetcher {
    fn fetch(&self, keyword: &KeywordEntry) -> Result<Vec<CrawlResult>> {
        let dir = self.root.join(slugify(&keyword.text));
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut results = self.read_dir_images(&dir, &keyword.text)?;
        for r in &mut results {
            r.lang = keyword.lang.clone();
        }
        Ok(results)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub added: u64,
    pub duplicate: u64,
    pub rejected: u64,
}

impl IngestReport {
    pub fn total(&self) -> u64 {
        self.added + self.duplicate + self.rejected
    }
}

/// Decoded header facts about an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageInfo {
    pub width: u32,
    pub height: u32,
    pub extension: &'static str,
}

/// Sniff the container format and read the dimensions; no pixel decoding.
pub fn probe_image(bytes: &[u8]) -> Option<ImageInfo> {
    let format = image::guess_format(bytes).ok()?;
    let extension = match format {
        image::ImageFormat::Png => "png",
        image::ImageFormat::Jpeg => "jpg",
        image::ImageFormat::WebP => "webp",
        _ => return None,
    };
    let reader = image::ImageReader::with_format(std::io::Cursor::new(bytes), format);
    let (width, height) = reader.into_dimensions().ok()?;
    if width == 0 || height == 0 {
        return None;
    }
    Some(ImageInfo { width, height, extension })
}

/// Where ingested images and manifest rows go. Implemented by the project
/// store; tests use an in-memory sink.
pub trait IngestSink: Send {
    fn contains(&self, id: &SampleId) -> bool;
    /// Persist the image bytes and return the path recorded in the manifest.
    fn store_image(&mut self, id: &SampleId, extension: &str, bytes: &[u8]) -> Result<String>;
    fn append(&mut self, sample: Sample) -> Result<()>;
}

/// Serializes concurrent ingestion through one writer.
pub struct Ingestor<S: IngestSink> {
    sink: Mutex<S>,
}

impl<S: IngestSink> Ingestor<S> {
    pub fn new(sink: S) -> Self {
        Ingestor { sink: Mutex::new(sink) }
    }

    pub fn into_inner(self) -> S {
        self.sink.into_inner().unwrap_or_else(|e| e.into_inner())
    }

    pub fn sink(&self) -> std::sync::MutexGuard<'_, S> {
        self.sink.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn ingest_crawl(&self, results: &[CrawlResult]) -> Result<IngestReport> {
        let mut report = IngestReport::default();
        for result in results {
            let Some(info) = probe_image(&result.bytes) else {
                log::warn!("rejected undecodable image for keyword {:?}", result.keyword);
                report.rejected += 1;
                continue;
            };
            let id = SampleId::from_content(&result.bytes);
            let mut sink = self.sink();
            if sink.contains(&id) {
                report.duplicate += 1;
                continue;
            }
            let image_path = sink.store_image(&id, info.extension, &result.bytes)?;
            sink.append(Sample {
                id,
                image_path,
                keyword: result.keyword.clone(),
                description: None,
                status: SampleStatus::Raw,
                source_lang: result.lang.clone(),
            })?;
            report.added += 1;
        }
        Ok(report)
    }
}

/// In-memory sink, handy for tests and dry runs.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub samples: Vec<Sample>,
    pub images: BTreeMap<SampleId, Vec<u8>>,
}

impl IngestSink for MemorySink {
    fn contains(&self, id: &SampleId) -> bool {
        self.images.contains_key(id)
    }

    fn store_image(&mut self, id: &SampleId, extension: &str, bytes: &[u8]) -> Result<String> {
        self.images.insert(*id, bytes.to_vec());
        Ok(format!("images/{id}.{extension}"))
    }

    fn append(&mut self, sample: Sample) -> Result<()> {
        self.samples.push(sample);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidecar::mock::MockSidecar;
    use crate::sidecar::Op;

    pub(crate) fn png(seed: u32) -> Vec<u8> {
        let img = image::RgbImage::from_fn(8, 6, |x, y| image::Rgb([(seed & 0xff) as u8, (seed >> 8) as u8, (x * 8 + y) as u8]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    fn crawl(bytes: Vec<u8>, kw: &str) -> CrawlResult {
        CrawlResult { bytes, keyword: kw.into(), lang: "en".into() }
    }

    struct DupLexicon;
    impl Lexicon for DupLexicon {
        fn translate(&self, term: &str, lang: &str) -> Vec<String> {
            vec![format!("{term}-{lang}")]
        }
    }

    fn script_keywords(visual: &[&str], text: &[&str]) -> MockSidecar {
        let mut m = MockSidecar::new();
        m.script_mut().keywords.insert(KeywordChannel::Visual, visual.iter().map(|s| s.to_string()).collect());
        m.script_mut().keywords.insert(KeywordChannel::Text, text.iter().map(|s| s.to_string()).collect());
        m
    }

    fn seed(i: u32) -> SeedImage {
        let bytes = png(i);
        SeedImage { id: SampleId::from_content(&bytes), bytes }
    }

    #[test]
    fn identical_channels_dedup() {
        let vlm = script_keywords(&["a", "b", "c"], &["a", "b", "c"]);
        let seeds = [seed(1)];
        let langs = ["en".to_string()];
        let req = ExpandRequest { category: "A".into(), seeds: &seeds, prompt: "flooded seat belt", langs: &langs, keywords_per_channel: 20 };
        let corpus = expand_keywords(&req, &vlm, &IdentityLexicon).unwrap();
        assert_eq!(corpus.entries.len(), 3);
        assert!(corpus.entries.iter().all(|e| e.source == KeywordSource::VlmVisual));
    }

    #[test]
    fn union_times_languages() {
        // {a,b} ∪ {b,c} = {a,b,c}; × {en,de} = 6 distinct (text, lang) pairs.
        let vlm = script_keywords(&["b", "c"], &["a", "b"]);
        let seeds = [seed(1)];
        let langs = ["en".to_string(), "de".to_string()];
        let req = ExpandRequest { category: "A".into(), seeds: &seeds, prompt: "p", langs: &langs, keywords_per_channel: 2 };
        let corpus = expand_keywords(&req, &vlm, &DupLexicon).unwrap();
        let got: Vec<(String, String)> = corpus.entries.iter().map(|e| (e.lang.clone(), e.text.clone())).collect();
        let mut want = Vec::new();
        for lang in ["de", "en"] {
            for t in ["a", "b", "c"] {
                want.push((lang.to_string(), format!("{t}-{lang}")));
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn dedup_is_case_and_whitespace_insensitive() {
        let vlm = script_keywords(&["Seat  Belt"], &["seat belt", " SEAT BELT "]);
        let seeds = [seed(2)];
        let langs = ["en".to_string()];
        let req = ExpandRequest { category: "A".into(), seeds: &seeds, prompt: "p", langs: &langs, keywords_per_channel: 2 };
        let corpus = expand_keywords(&req, &vlm, &IdentityLexicon).unwrap();
        assert_eq!(corpus.entries.len(), 1);
    }

    #[test]
    fn multilingual_table_expansion() {
        let lex = TableLexicon::parse("seat belt\tde\tSicherheitsgurt\nseat belt\tfr\tceinture de sécurité\n").unwrap();
        let vlm = script_keywords(&["seat belt mold"], &["seat belt"]);
        let seeds = [seed(3)];
        let langs = ["en".to_string(), "de".to_string(), "fr".to_string()];
        let req = ExpandRequest { category: "A".into(), seeds: &seeds, prompt: "flooded car seat belt", langs: &langs, keywords_per_channel: 5 };
        let corpus = expand_keywords(&req, &vlm, &lex).unwrap();
        let texts: BTreeSet<&str> = corpus.entries.iter().map(|e| e.text.as_str()).collect();
        assert!(texts.contains("Sicherheitsgurt"));
        assert!(texts.contains("ceinture de sécurité"));
        assert!(corpus.entries.iter().any(|e| e.source == KeywordSource::VlmVisual));
        assert!(corpus.entries.iter().any(|e| e.source == KeywordSource::TextOnly));
    }

    #[test]
    fn order_independent() {
        let vlm = MockSidecar::new();
        let s = [seed(1), seed(2), seed(3)];
        let s_rev = [seed(3), seed(1), seed(2)];
        let l = ["en".to_string(), "de".to_string()];
        let l_rev = ["de".to_string(), "en".to_string()];
        let a = expand_keywords(&ExpandRequest { category: "A".into(), seeds: &s, prompt: "p", langs: &l, keywords_per_channel: 4 }, &vlm, &IdentityLexicon).unwrap();
        let b = expand_keywords(&ExpandRequest { category: "A".into(), seeds: &s_rev, prompt: "p", langs: &l_rev, keywords_per_channel: 4 }, &vlm, &IdentityLexicon).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failing_channel_is_named() {
        let mut vlm = MockSidecar::new();
        vlm.script_mut().fail_ops.insert(Op::ExpandKeywords);
        let seeds = [seed(1)];
        let langs = ["en".to_string()];
        let err = expand_keywords(&ExpandRequest { category: "A".into(), seeds: &seeds, prompt: "p", langs: &langs, keywords_per_channel: 4 }, &vlm, &IdentityLexicon).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vlm_visual") && msg.contains("text_only"), "{msg}");
    }

    #[test]
    fn empty_union_is_an_error() {
        let vlm = script_keywords(&[], &[]);
        let langs = ["en".to_string()];
        let err = expand_keywords(&ExpandRequest { category: "A".into(), seeds: &[], prompt: "p", langs: &langs, keywords_per_channel: 4 }, &vlm, &IdentityLexicon).unwrap_err();
        assert!(err.to_string().contains("no keywords produced"));
    }

    #[test]
    fn preconditions() {
        let vlm = MockSidecar::new();
        let langs = ["en".to_string()];
        assert!(matches!(
            expand_keywords(&ExpandRequest { category: "A".into(), seeds: &[], prompt: "  ", langs: &langs, keywords_per_channel: 4 }, &vlm, &IdentityLexicon),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            expand_keywords(&ExpandRequest { category: "A".into(), seeds: &[], prompt: "p", langs: &[], keywords_per_channel: 4 }, &vlm, &IdentityLexicon),
            Err(Error::Precondition(_))
        ));
    }

    fn ingestor() -> Ingestor<MemorySink> {
        Ingestor::new(MemorySink::default())
    }

    #[test]
    fn same_bytes_two_keywords() {
        let ing = ingestor();
        let r = ing.ingest_crawl(&[crawl(png(1), "a"), crawl(png(1), "b")]).unwrap();
        assert_eq!(r, IngestReport { added: 1, duplicate: 1, rejected: 0 });
    }

    #[test]
    fn empty_results() {
        assert_eq!(ingestor().ingest_crawl(&[]).unwrap(), IngestReport::default());
    }

    #[test]
    fn hundred_with_seven_duplicates() {
        let mut results: Vec<CrawlResult> = (0..93).map(|i| crawl(png(i), "k")).collect();
        for i in 0..7 {
            results.push(crawl(png(i * 3), "other"));
        }
        let distinct: BTreeSet<SampleId> = results.iter().map(|r| SampleId::from_content(&r.bytes)).collect();
        let ing = ingestor();
        let r = ing.ingest_crawl(&results).unwrap();
        assert_eq!(r.added, distinct.len() as u64);
        assert_eq!(r.added, 93);
        assert_eq!(r.duplicate, 7);
        assert_eq!(r.total(), 100);
        let samples = &ing.sink().samples;
        assert!(samples.iter().all(|s| s.status == SampleStatus::Raw));
    }

    #[test]
    fn undecodable_bytes_are_rejected() {
        let r = ingestor().ingest_crawl(&[crawl(b"not an image".to_vec(), "k"), crawl(png(5), "k")]).unwrap();
        assert_eq!(r, IngestReport { added: 1, duplicate: 0, rejected: 1 });
    }

    #[test]
    fn reingest_is_idempotent() {
        let ing = ingestor();
        let results: Vec<CrawlResult> = (0..10).map(|i| crawl(png(i), "k")).collect();
        let first = ing.ingest_crawl(&results).unwrap();
        let second = ing.ingest_crawl(&results).unwrap();
        assert_eq!(first.added, 10);
        assert_eq!(second, IngestReport { added: 0, duplicate: 10, rejected: 0 });
        assert_eq!(ing.sink().samples.len(), 10);
    }

    #[test]
    fn concurrent_ingest_counts_each_image_once() {
        let ing = ingestor();
        let results: Vec<CrawlResult> = (0..40).map(|i| crawl(png(i), "k")).collect();
        let reports: Vec<IngestReport> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..4).map(|_| s.spawn(|| ing.ingest_crawl(&results).unwrap())).collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let added: u64 = reports.iter().map(|r| r.added).sum();
        let dup: u64 = reports.iter().map(|r| r.duplicate).sum();
        assert_eq!(added, 40);
        assert_eq!(dup, 120);
    }

    #[test]
    fn directory_fetcher_reads_keyword_folders() {
        let dir = tempfile::tempdir().unwrap();
        let kdir = dir.path().join("seat-belt");
        fs::create_dir_all(&kdir).unwrap();
        fs::write(kdir.join("1.png"), png(1)).unwrap();
        fs::write(kdir.join("2.PNG"), png(2)).unwrap();
        fs::write(kdir.join("notes.txt"), b"x").unwrap();
        let f = DirectoryFetcher::new(dir.path(), "en");
        let all = f.fetch_all().unwrap();
        assert_eq!(all.len(), 2);
        assert!(all.iter().all(|r| r.keyword == "seat belt"));
        let entry = KeywordEntry { lang: "de".into(), text: "Seat Belt".into(), source: KeywordSource::TextOnly };
        let got = f.fetch(&entry).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got.iter().all(|r| r.lang == "de"));
    }

    #[test]
    fn slugs() {
        assert_eq!(slugify("Seat  Belt!"), "seat-belt");
        assert_eq!(keyword_from_slug("seat-belt_rust"), "seat belt rust");
    }
}
