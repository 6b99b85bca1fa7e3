use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use memgraph_core::ggpo::{audit_report, prepare_group_with, IdMatcher, RelevanceMatcher, TextOverlapMatcher};
use memgraph_core::retrieval::{load_manifest_dir, SourceModality};
use memgraph_core::runtime::{resume_episode, InflightLimiter, SessionState};
use memgraph_core::stats::{build_report, episode_stats, StatsReport};
use memgraph_core::{
    build_corpus, export_training_batch, search, Corpus, Observation, Policy, RemotePolicy, ScriptedPolicy, Trajectory,
};
use rayon::prelude::*;
use serde::Deserialize;

use crate::config::{Config, PolicyKind};
use crate::{domain, CliError};

fn plural(n: usize, word: &str) -> String {
    format!("{n} {word}{}", if n == 1 { "" } else { "s" })
}

/// Build a corpus from a directory of manifests and write it to `out`.
/// Returns the one-line summary.
pub fn corpus_build(manifest_dir: &Path, out: &Path, clip_len_s: f64) -> Result<String, CliError> {
    let items = load_manifest_dir(manifest_dir).map_err(domain)?;
    let corpus = build_corpus(items, clip_len_s).map_err(domain)?;
    write_file(out, &corpus.to_canonical_json())?;
    Ok(corpus_summary(&corpus))
}

pub fn corpus_summary(corpus: &Corpus) -> String {
    let mut parts = vec![plural(corpus.count(SourceModality::Text), "text")];
    let images = corpus.count(SourceModality::Image);
    if images > 0 {
        parts.push(plural(images, "image"));
    }
    parts.push(plural(corpus.count(SourceModality::Video), "video"));
    parts.push(format!("{} indexed", plural(corpus.clips().len(), "clip")));
    parts.join(", ")
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    Corpus::load(path).map_err(domain)
}

pub fn search_corpus(corpus: &Corpus, query: &str, k: usize, n_frames: usize) -> Result<Vec<Observation>, CliError> {
    search(corpus, query, k, n_frames).map_err(domain)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// One episode request, as given on the command line or as a line of a batch file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRequest {
    pub id: String,
    pub query: String,
    #[serde(default)]
    pub gold: Option<String>,
    /// Per-episode script, overriding the config's.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

#[derive(Debug)]
pub struct EpisodeResult {
    pub id: String,
    pub trajectory: Trajectory,
    pub path: PathBuf,
}

impl EpisodeResult {
    pub fn verdict_line(&self) -> String {
        let t = &self.trajectory;
        let outcome = match t.answer() {
            Some(a) => format!("answer {a:?}"),
            None => format!("truncated after {}", plural(t.records.len(), "cycle")),
        };
        let verdict = match (t.reward, &t.judge_error) {
            (Some(r), _) => r.to_string(),
            (None, Some(e)) => format!("absent ({e})"),
            (None, None) => "absent".into(),
        };
        format!("{}: {outcome}; verdict {verdict}", self.id)
    }
}

/// Read a batch file: one JSON request per line.
pub fn read_requests(path: &Path) -> Result<Vec<EpisodeRequest>, CliError> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut r: EpisodeRequest = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if let Some(s) = r.script.as_mut().filter(|s| s.is_relative()) {
            *s = base.join(&*s);
        }
        out.push(r);
    }
    let mut ids = BTreeSet::new();
    if let Some(dup) = out.iter().find(|r| !ids.insert(r.id.as_str())) {
        return Err(CliError::Usage(format!("duplicate episode id `{}` in {}", dup.id, path.display())));
    }
    Ok(out)
}

fn make_policy(cfg: &Config, request: &EpisodeRequest, limiter: &InflightLimiter) -> Result<Box<dyn Policy>, CliError> {
    match cfg.policy.kind {
        PolicyKind::Scripted => {
            let path = request.script.as_ref().or(cfg.policy.script.as_ref()).ok_or_else(|| CliError::Config {
                field: "policy.script".into(),
                message: "a scripted policy needs a script file".into(),
            })?;
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
                field: "policy.script".into(),
                message: format!("{}: {e}", path.display()),
            })?;
            let policy = ScriptedPolicy::from_json(&text).map_err(|e| CliError::Config {
                field: "policy.script".into(),
                message: format!("{}: {e}", path.display()),
            })?;
            Ok(Box::new(policy))
        }
        PolicyKind::Remote => Ok(Box::new(RemotePolicy::new(cfg.policy.remote.clone(), limiter.clone()).map_err(domain)?)),
    }
}

/// Run one episode, write its trajectory and (when configured) checkpoints.
pub fn run_episode_request(
    cfg: &Config,
    corpus: &Corpus,
    request: &EpisodeRequest,
    out: &Path,
    resume: Option<&Path>,
    limiter: &InflightLimiter,
) -> Result<EpisodeResult, CliError> {
    let episode = cfg.episode_config()?;
    let mut policy = make_policy(cfg, request, limiter)?;
    let state = match resume {
        Some(p) => SessionState::load(p).with_context(|| format!("loading session {}", p.display()))?,
        None => SessionState::new(&request.query).map_err(domain)?,
    };
    let session_path = cfg.paths.session_dir.as_ref().map(|d| d.join(format!("{}.session.json", request.id)));
    if let Some(dir) = &cfg.paths.session_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut save_error = None;
    let result = resume_episode(policy.as_mut(), corpus, state, &episode, |s| {
        if let Some(p) = &session_path {
            if let Err(e) = s.save(p) {
                save_error.get_or_insert(e);
            }
        }
    });
    if let Some(e) = save_error {
        return Err(domain(anyhow::Error::from(e).context("writing session checkpoint")));
    }
    let mut trajectory = result.with_context(|| format!("episode `{}`", request.id))?;
    if let Some(gold) = &request.gold {
        trajectory.judge(gold, &episode.judge);
    }
    write_file(out, &trajectory.to_jsonl())?;
    Ok(EpisodeResult { id: request.id.clone(), trajectory, path: out.to_path_buf() })
}

/// Run independent episodes on up to `parallel` threads. Results keep the
/// request order; each element carries its own error.
pub fn run_batch(
    cfg: &Config,
    corpus: &Corpus,
    requests: &[EpisodeRequest],
    parallel: usize,
) -> Result<Vec<Result<EpisodeResult, CliError>>, CliError> {
    let limiter = InflightLimiter::new(cfg.policy.remote.max_in_flight);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build().map_err(domain)?;
    Ok(pool.install(|| {
        requests
            .par_iter()
            .map(|r| {
                let out = cfg.paths.output_dir.join(format!("{}.jsonl", r.id));
                run_episode_request(cfg, corpus, r, &out, None, &limiter)
            })
            .collect()
    }))
}

/// Gold evidence per query: a list of corpus ids, or an object with ids and/or
/// passages matched by token overlap.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GoldEntry {
    Ids(Vec<String>),
    Detailed {
        #[serde(default)]
        evidence_ids: Vec<String>,
        #[serde(default)]
        evidence_texts: Vec<String>,
    },
}

struct GoldMatcher {
    ids: IdMatcher,
    texts: TextOverlapMatcher,
}

impl RelevanceMatcher for GoldMatcher {
    fn is_relevant(&self, o: &Observation) -> bool {
        self.ids.is_relevant(o) || self.texts.is_relevant(o)
    }
}

impl GoldEntry {
    fn matcher(&self, min_overlap: f64) -> GoldMatcher {
        let (ids, texts): (&[String], &[String]) = match self {
            GoldEntry::Ids(ids) => (ids, &[]),
            GoldEntry::Detailed { evidence_ids, evidence_texts } => (evidence_ids, evidence_texts),
        };
        GoldMatcher {
            ids: IdMatcher(ids.iter().cloned().collect()),
            texts: TextOverlapMatcher::new(texts, min_overlap),
        }
    }
}

pub struct PruneOutput {
    pub batch: String,
    pub audit: String,
}

/// Group trajectories by query (first-seen order), mask and score them.
pub fn prune(cfg: &Config, trajectories: &[PathBuf], gold_manifest: &Path) -> Result<PruneOutput, CliError> {
    let gold_text = std::fs::read_to_string(gold_manifest).with_context(|| format!("reading {}", gold_manifest.display()))?;
    let gold: BTreeMap<String, GoldEntry> = serde_json::from_str(&gold_text)
        .map_err(|e| CliError::Usage(format!("{}: expected {{query: evidence}} object: {e}", gold_manifest.display())))?;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for path in trajectories {
        let t = read_trajectory(path)?;
        if !grouped.contains_key(&t.query) {
            order.push(t.query.clone());
        }
        grouped.entry(t.query.clone()).or_default().push(t);
    }
    let empty = GoldEntry::Ids(Vec::new());
    let groups = order
        .par_iter()
        .map(|q| {
            let entry = gold.get(q).unwrap_or_else(|| {
                tracing::warn!(query = %q, "no gold evidence listed; no retrieval counts as valuable");
                &empty
            });
            prepare_group_with(&grouped[q], &entry.matcher(cfg.ggpo.text_overlap))
                .with_context(|| format!("group {q:?}"))
                .map_err(domain)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let batch = export_training_batch(&groups).map_err(domain)?;
    Ok(PruneOutput { batch, audit: audit_report(&groups) })
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Trajectory::from_jsonl(&text).with_context(|| format!("parsing {}", path.display()))?)
}

pub fn stats(files: &[PathBuf]) -> Result<StatsReport, CliError> {
    let episodes = files
        .iter()
        .map(|p| {
            let t = read_trajectory(p)?;
            let label = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok(episode_stats(&label, &t))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(build_report(episodes))
}

pub fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    write_file(path, contents)
}
