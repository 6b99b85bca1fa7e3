//! Deterministic multimodal corpus and search engine.
//!
//! Text documents are indexed by their body, images and videos by their
//! caption. Videos are cut into fixed-length clips and each clip is a separate
//! searchable unit. Embeddings are seeded hashed bag-of-tokens vectors, so the
//! whole engine is reproducible bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::energy::{Modality, VisualItemSeed};

pub const EMBEDDING_DIM: usize = 256;
pub const EMBEDDING_SEED: u64 = 0x9e37_79b9_7f4a_7c15;
pub const DEFAULT_CLIP_LEN_S: f64 = 60.0;
pub const DEFAULT_SEARCH_K: usize = 5;
pub const DEFAULT_FRAMES_PER_CLIP: usize = 8;
pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceModality {
    Text,
    Image,
    Video,
}

impl SourceModality {
    /// Label used in observation ids ("Text 1", "Video 2", ...).
    pub fn label(self) -> &'static str {
        match self {
            SourceModality::Text => "Text",
            SourceModality::Image => "Image",
            SourceModality::Video => "Video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub modality: SourceModality,
    /// Body for text documents, caption for images and videos.
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub asset_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    /// Position of the source video in the corpus item list.
    pub source: usize,
    pub source_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp_s: f64,
    pub frame_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpan {
    pub start_s: f64,
    pub end_s: f64,
}

/// One retrieved unit as offered to the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// "Text 1", "Image 1", "Video 1", ... dense per modality within a result.
    pub id: String,
    pub modality: SourceModality,
    pub source_id: String,
    pub score: f64,
    pub content: String,
    pub asset_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipSpan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<Frame>,
}

/// L2-normalized embedding; the zero vector marks text with no tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_searchable(&self) -> bool {
        self.values.iter().any(|&v| v != 0.0)
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum SearchUnit {
    Item(usize),
    Clip(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct IndexEntry {
    unit: SearchUnit,
    vector: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    items: Vec<CorpusItem>,
    clip_len_s: f64,
    clips: Vec<Clip>,
    index: Vec<IndexEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("duplicate corpus id `{0}`")]
    DuplicateId(String),
    #[error("clip length must be positive, got {0}")]
    BadClipLength(f64),
    #[error("item `{id}`: {reason}")]
    BadItem { id: String, reason: String },
    #[error("corpus has no searchable units")]
    EmptyIndex,
    #[error("k must be >= 1")]
    BadK,
    #[error("frames per clip must be >= 1")]
    BadFrameCount,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("malformed corpus document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported corpus schema version {0}")]
    SchemaVersion(u32),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Case-folded alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

// 64-bit FNV-1a over the seed bytes followed by the token bytes.
fn bucket_of(token: &str) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in EMBEDDING_SEED.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % EMBEDDING_DIM as u64) as usize
}

/// Raw token counts per hash bucket, before normalization.
pub fn token_buckets(text: &str) -> BTreeMap<usize, u32> {
    let mut counts = BTreeMap::new();
    for token in tokenize(text) {
        *counts.entry(bucket_of(&token)).or_insert(0) += 1;
    }
    counts
}

pub fn embed(text: &str) -> Embedding {
    let mut values = vec![0.0; EMBEDDING_DIM];
    for (bucket, count) in token_buckets(text) {
        values[bucket] = f64::from(count);
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    }
    Embedding { values }
}

/// Split `[0, duration)` into consecutive clips of `clip_len` seconds; the
/// last one may be shorter.
pub fn segment_video(duration_s: f64, clip_len_s: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut i = 0u64;
    loop {
        let start = i as f64 * clip_len_s;
        if start >= duration_s {
            break;
        }
        let end = ((i + 1) as f64 * clip_len_s).min(duration_s);
        out.push((start, end));
        i += 1;
    }
    out
}

pub fn build_corpus(items: Vec<CorpusItem>, clip_len_s: f64) -> Result<Corpus, RetrievalError> {
    if !clip_len_s.is_finite() || clip_len_s <= 0.0 {
        return Err(RetrievalError::BadClipLength(clip_len_s));
    }
    let mut seen = HashSet::new();
    for item in &items {
        if !seen.insert(item.id.as_str()) {
            return Err(RetrievalError::DuplicateId(item.id.clone()));
        }
        let bad = |reason: &str| RetrievalError::BadItem { id: item.id.clone(), reason: reason.into() };
        match (item.modality, item.duration_s) {
            (SourceModality::Video, Some(d)) if d.is_finite() && d > 0.0 => {}
            (SourceModality::Video, _) => return Err(bad("video needs a positive duration_s")),
            (_, Some(_)) => return Err(bad("only videos carry duration_s")),
            (_, None) => {}
        }
    }
    let mut clips = Vec::new();
    let mut index = Vec::new();
    for (pos, item) in items.iter().enumerate() {
        let vector = embed(&item.content);
        match item.modality {
            SourceModality::Video => {
                for (start_s, end_s) in segment_video(item.duration_s.unwrap_or(0.0), clip_len_s) {
                    index.push(IndexEntry { unit: SearchUnit::Clip(clips.len()), vector: vector.clone() });
                    clips.push(Clip { source: pos, source_id: item.id.clone(), start_s, end_s });
                }
            }
            _ => index.push(IndexEntry { unit: SearchUnit::Item(pos), vector }),
        }
    }
    index.retain(|e| e.vector.is_searchable());
    Ok(Corpus { items, clip_len_s, clips, index })
}

/// `n` frames on a uniform grid over `[start, end)`, the first at `start`.
pub fn sample_frames(clip: &Clip, n: usize) -> Vec<Frame> {
    let span = clip.end_s - clip.start_s;
    (0..n)
        .map(|i| {
            let ts = clip.start_s + span * i as f64 / n as f64;
            Frame { timestamp_s: ts, frame_ref: frame_ref(&clip.source_id, ts) }
        })
        .collect()
}

fn frame_ref(source_id: &str, ts: f64) -> String {
    format!("{source_id}#t={}", canonical::format_float(ts, 3))
}

/// Scores are ranked at 1e-12 resolution so that mathematically tied units
/// fall back to insertion order regardless of float noise.
fn rank_key(score: f64) -> i64 {
    (score * 1e12).round() as i64
}

pub fn search(
    corpus: &Corpus,
    query: &str,
    k: usize,
    n_frames: usize,
) -> Result<Vec<Observation>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::BadK);
    }
    if n_frames == 0 {
        return Err(RetrievalError::BadFrameCount);
    }
    if corpus.index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let q = embed(query);
    let mut scored: Vec<(i64, usize, f64)> = corpus
        .index
        .iter()
        .enumerate()
        .map(|(pos, e)| {
            let s = q.dot(&e.vector);
            (rank_key(s), pos, s)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);

    let mut counters: BTreeMap<SourceModality, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(scored.len());
    for (_, pos, score) in scored {
        let (item, clip) = match &corpus.index[pos].unit {
            SearchUnit::Item(i) => (&corpus.items[*i], None),
            SearchUnit::Clip(c) => {
                let clip = &corpus.clips[*c];
                (&corpus.items[clip.source], Some(clip))
            }
        };
        let n = counters.entry(item.modality).or_insert(0);
        *n += 1;
        out.push(Observation {
            id: format!("{} {}", item.modality.label(), n),
            modality: item.modality,
            source_id: item.id.clone(),
            score,
            content: item.content.clone(),
            asset_ref: item.asset_ref.clone(),
            clip: clip.map(|c| ClipSpan { start_s: c.start_s, end_s: c.end_s }),
            frames: clip.map(|c| sample_frames(c, n_frames)).unwrap_or_default(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyframeResolution {
    pub seeds: Vec<VisualItemSeed>,
    /// Requested timestamps that fell outside the clip.
    pub rejected: Vec<f64>,
}

/// Snap each requested timestamp to the nearest sampled frame of a video
/// observation (earlier frame on ties). Duplicate snaps collapse into one
/// seed; timestamps outside the clip are rejected.
pub fn resolve_keyframes(observation: &Observation, key_timestamps_s: &[f64], priority: u8) -> KeyframeResolution {
    let mut out = KeyframeResolution::default();
    let Some(clip) = &observation.clip else {
        out.rejected.extend_from_slice(key_timestamps_s);
        return out;
    };
    let mut taken = HashSet::new();
    for &ts in key_timestamps_s {
        if !(ts >= clip.start_s && ts < clip.end_s) || observation.frames.is_empty() {
            tracing::warn!(observation = %observation.id, ts, "key timestamp outside clip, dropped");
            out.rejected.push(ts);
            continue;
        }
        let mut best = 0;
        for (i, f) in observation.frames.iter().enumerate() {
            if (f.timestamp_s - ts).abs() < (observation.frames[best].timestamp_s - ts).abs() {
                best = i;
            }
        }
        if taken.insert(best) {
            let frame = &observation.frames[best];
            out.seeds.push(VisualItemSeed {
                modality: Modality::VideoFrame,
                payload_ref: frame.frame_ref.clone(),
                source_timestamp_s: Some(frame.timestamp_s),
                saliency: true,
                priority,
            });
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct CorpusDocument {
    schema_version: u32,
    clip_len_s: f64,
    items: Vec<CorpusItem>,
    clips: Vec<Clip>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    List(Vec<CorpusItem>),
    Wrapped { items: Vec<CorpusItem> },
}

impl Corpus {
    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    pub fn clips(&self) -> &[Clip] {
        &self.clips
    }

    pub fn clip_len_s(&self) -> f64 {
        self.clip_len_s
    }

    /// Number of searchable units (documents, images and clips with tokens).
    pub fn indexed_units(&self) -> usize {
        self.index.len()
    }

    pub fn count(&self, modality: SourceModality) -> usize {
        self.items.iter().filter(|i| i.modality == modality).count()
    }

    pub fn to_canonical_json(&self) -> String {
        let doc = CorpusDocument {
            schema_version: CORPUS_SCHEMA_VERSION,
            clip_len_s: self.clip_len_s,
            items: self.items.clone(),
            clips: self.clips.clone(),
        };
        canonical::to_string(&doc).expect("corpus serializes")
    }

    /// Load a corpus document; the index is rebuilt from the items.
    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        let doc: CorpusDocument = serde_json::from_str(text)?;
        if doc.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(RetrievalError::SchemaVersion(doc.schema_version));
        }
        build_corpus(doc.items, doc.clip_len_s)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let text = std::fs::read_to_string(path).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Read every `*.json` manifest in `dir` (sorted by file name). Each file holds
/// either a list of items or an object with an `items` list. Items without an
/// `asset_ref` use their id.
pub fn load_manifest_dir(dir: &Path) -> Result<Vec<CorpusItem>, RetrievalError> {
    let io = |source| RetrievalError::Io { path: dir.display().to_string(), source };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut items = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let batch = match serde_json::from_str::<ManifestFile>(&text)? {
            ManifestFile::List(v) => v,
            ManifestFile::Wrapped { items } => items,
        };
        items.extend(batch.into_iter().map(|mut item| {
            if item.asset_ref.is_empty() {
                item.asset_ref = item.id.clone();
            }
            item
        }));
    }
    if items.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    Ok(items)
}
