//! Per-episode diagnostics: cycle counts, repeated queries and a
//! character-based token proxy.
//!
//! Token counts here are `rendered prompt characters / 4`. They are a proxy
//! for trend comparison, not tokenizer output.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::graph::normalize_query;
use crate::protocol::Action;
use crate::runtime::Trajectory;

pub const CHARS_PER_PROXY_TOKEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub label: String,
    pub query: String,
    pub cycles: usize,
    pub searches: usize,
    pub answered: bool,
    pub reward: Option<u8>,
    pub duplicate_queries: usize,
    pub prompt_chars: usize,
    pub proxy_tokens: usize,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsReport {
    pub episodes: Vec<EpisodeStats>,
    pub total_episodes: usize,
    pub total_duplicate_queries: usize,
    pub total_proxy_tokens: usize,
    pub mean_proxy_tokens: f64,
    pub mean_searches: f64,
    /// Episodes keyed by search count.
    pub search_histogram: BTreeMap<usize, usize>,
}

/// Searches whose normalized query already appeared earlier in the episode.
pub fn duplicate_count<S: AsRef<str>>(queries: &[S]) -> usize {
    let mut seen = HashSet::new();
    queries.iter().filter(|q| !seen.insert(normalize_query(q.as_ref()))).count()
}

pub fn episode_stats(label: &str, t: &Trajectory) -> EpisodeStats {
    let queries: Vec<&str> = t
        .records
        .iter()
        .filter_map(|r| match &r.action {
            Action::Retrieve { query, .. } => Some(query.as_str()),
            _ => None,
        })
        .collect();
    let prompt_chars: usize = t.records.iter().map(|r| r.prompt_chars + r.memorize_prompt_chars).sum();
    EpisodeStats {
        label: label.to_string(),
        query: t.query.clone(),
        cycles: t.records.len(),
        searches: queries.len(),
        answered: !t.is_truncated(),
        reward: t.reward,
        duplicate_queries: duplicate_count(&queries),
        prompt_chars,
        proxy_tokens: prompt_chars / CHARS_PER_PROXY_TOKEN,
        retries: t.records.iter().map(|r| r.retries).sum(),
    }
}

pub fn build_report(episodes: Vec<EpisodeStats>) -> StatsReport {
    let n = episodes.len();
    let total_proxy_tokens = episodes.iter().map(|e| e.proxy_tokens).sum();
    let mut search_histogram = BTreeMap::new();
    for e in &episodes {
        *search_histogram.entry(e.searches).or_insert(0) += 1;
    }
    let mean = |f: fn(&EpisodeStats) -> usize| {
        if n == 0 {
            0.0
        } else {
            episodes.iter().map(f).sum::<usize>() as f64 / n as f64
        }
    };
    StatsReport {
        total_episodes: n,
        total_duplicate_queries: episodes.iter().map(|e| e.duplicate_queries).sum(),
        total_proxy_tokens,
        mean_proxy_tokens: mean(|e| e.proxy_tokens),
        mean_searches: mean(|e| e.searches),
        search_histogram,
        episodes,
    }
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        canonical::to_string_with(self, 3).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "episodes: {}", self.total_episodes);
        if self.total_episodes == 0 {
            return out;
        }
        let _ = writeln!(out, "duplicate queries: {}", self.total_duplicate_queries);
        let _ = writeln!(
            out,
            "proxy tokens (chars/4): total {} mean {}",
            self.total_proxy_tokens,
            canonical::format_float(self.mean_proxy_tokens, 1)
        );
        let _ = writeln!(out, "mean searches: {}", canonical::format_float(self.mean_searches, 2));
        out.push_str("searches per episode:\n");
        for (k, v) in &self.search_histogram {
            let _ = writeln!(out, "  {k}: {v}");
        }
        for e in &self.episodes {
            let reward = e.reward.map_or("-".to_string(), |r| r.to_string());
            let _ = writeln!(
                out,
                "{}: cycles={} searches={} duplicates={} proxy_tokens={} answered={} reward={}",
                e.label, e.cycles, e.searches, e.duplicate_queries, e.proxy_tokens, e.answered, reward
            );
        }
        out
    }
}
