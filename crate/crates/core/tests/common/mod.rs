//! Independent oracles and random generators shared by the property tests
//! and the acceptance suite.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use memgraph_core::graph::NodeKind;
use memgraph_core::protocol::Action;
use memgraph_core::retrieval::{token_buckets, SourceModality};
use memgraph_core::{Corpus, CorpusItem, EnergyParams, MemoryGraph, Modality, Observation, VisualItemSeed};
use rand::seq::IndexedRandom;
use rand::Rng;

/// Ω per live item, straight from the definitions with memoized recursion
/// over nodes.
pub fn naive_energy(graph: &MemoryGraph, params: &EnergyParams) -> BTreeMap<usize, f64> {
    fn node_mean(
        v: usize,
        graph: &MemoryGraph,
        params: &EnergyParams,
        memo: &mut HashMap<usize, f64>,
        out: &mut BTreeMap<usize, f64>,
    ) -> f64 {
        if let Some(&m) = memo.get(&v) {
            return m;
        }
        let nodes = graph.nodes();
        let kids: Vec<usize> = nodes.iter().filter(|n| n.parent_indices.contains(&v)).map(|n| n.index).collect();
        let feedback: f64 = kids.iter().map(|&c| node_mean(c, graph, params, memo, out)).sum();
        let node = &nodes[v];
        let t = (graph.step() - node.created_step) as f64;
        let mut values = Vec::new();
        for &o in &node.items {
            let item = &graph.memory_bank()[o];
            if item.dropped() {
                continue;
            }
            let p_hat = (f64::from(item.priority) - 1.0) / 4.0;
            let e_int = p_hat * (1.0 + kids.len() as f64) * (-params.lambda_decay * t).exp();
            let omega = e_int + params.gamma_feedback * feedback;
            out.insert(o, omega);
            values.push(omega);
        }
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 };
        memo.insert(v, mean);
        mean
    }
    let mut memo = HashMap::new();
    let mut out = BTreeMap::new();
    for v in 0..graph.len() {
        node_mean(v, graph, params, &mut memo, &mut out);
    }
    out
}

/// Nodes with a directed path to the answer, by scanning reachability from
/// every node forward.
#[allow(clippy::needless_range_loop)]
pub fn reachability_critical_path(graph: &MemoryGraph) -> BTreeSet<usize> {
    let Some(answer) = graph.nodes().iter().position(|n| n.kind == NodeKind::Answer) else {
        return BTreeSet::new();
    };
    let n = graph.len();
    let mut reach = vec![vec![false; n]; n];
    for node in graph.nodes() {
        for &p in &node.parent_indices {
            reach[p][node.index] = true;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    (0..n).filter(|&i| i == answer || reach[i][answer]).collect()
}

const WORDS: &[&str] = &[
    "red", "car", "engine", "blue", "sky", "river", "film", "director", "award", "city", "museum", "bridge",
    "train", "song", "album", "novel", "harbor", "winter", "garden", "tower",
];

pub fn words<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Random multi-parent graph: `searches` populated search nodes with up to
/// `max_items` items each, optionally answered.
pub fn random_graph<R: Rng>(rng: &mut R, searches: usize, max_items: usize, answer: bool) -> MemoryGraph {
    let mut g = MemoryGraph::new("random query").unwrap();
    for i in 1..=searches {
        let parents = random_parents(rng, i);
        let idx = g.add_search_node(&format!("s{i}"), &parents, &words(rng, 1, 3)).unwrap();
        let n_items = rng.random_range(0..=max_items);
        let items: Vec<usize> = (0..n_items)
            .map(|k| g.add_item(idx, random_seed(rng, i, k)).unwrap())
            .collect();
        g.populate_node(idx, "summary", &items).unwrap();
    }
    if answer {
        let parents = random_parents(rng, searches + 1);
        g.add_answer_node(&parents, "done").unwrap();
    }
    g
}

/// A non-empty random subset of the titles of nodes `0..n`.
pub fn random_parents<R: Rng>(rng: &mut R, n: usize) -> Vec<String> {
    let mut out: Vec<String> = (0..n).filter(|_| rng.random_bool(0.4)).map(title).collect();
    if out.is_empty() {
        out.push(title(rng.random_range(0..n)));
    }
    out
}

pub fn title(i: usize) -> String {
    if i == 0 {
        "root".into()
    } else {
        format!("s{i}")
    }
}

pub fn random_seed<R: Rng>(rng: &mut R, node: usize, k: usize) -> VisualItemSeed {
    let modality = *[Modality::Text, Modality::Image, Modality::VideoFrame].choose(rng).unwrap();
    VisualItemSeed {
        modality,
        payload_ref: format!("item-{node}-{k}"),
        source_timestamp_s: (modality == Modality::VideoFrame).then(|| f64::from(rng.random_range(0..600u32)) / 10.0),
        saliency: rng.random_bool(0.85),
        priority: rng.random_range(1..=5),
    }
}

/// Brute-force ranking of every searchable unit using exact integer
/// arithmetic on token counts. Returns `(source_id, clip start)` best first.
pub fn oracle_search(corpus: &Corpus, query: &str, k: usize) -> Vec<(String, Option<f64>)> {
    let q = token_buckets(query);
    let mut units: Vec<(String, Option<f64>, u128, u128)> = Vec::new();
    let score = |text: &str| {
        let d = token_buckets(text);
        let dot: u128 = d.iter().map(|(b, &c)| u128::from(c) * u128::from(*q.get(b).unwrap_or(&0))).sum();
        let norm2: u128 = d.values().map(|&c| u128::from(c) * u128::from(c)).sum();
        (dot, norm2)
    };
    for item in corpus.items() {
        let (dot, norm2) = score(&item.content);
        if norm2 == 0 {
            continue;
        }
        match item.modality {
            SourceModality::Video => {
                for c in corpus.clips().iter().filter(|c| c.source_id == item.id) {
                    units.push((item.id.clone(), Some(c.start_s), dot, norm2));
                }
            }
            _ => units.push((item.id.clone(), None, dot, norm2)),
        }
    }
    // cos_a > cos_b  <=>  dot_a^2 * norm_b > dot_b^2 * norm_a (dots are >= 0)
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| {
        let (_, _, da, na) = units[a];
        let (_, _, db, nb) = units[b];
        let lhs = da * da * nb;
        let rhs = db * db * na;
        match rhs.cmp(&lhs) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        }
    });
    order.into_iter().take(k).map(|i| (units[i].0.clone(), units[i].1)).collect()
}

pub fn observation_key(o: &Observation) -> (String, Option<f64>) {
    (o.source_id.clone(), o.clip.as_ref().map(|c| c.start_s))
}

pub fn random_corpus_items<R: Rng>(rng: &mut R, max_units: usize) -> Vec<CorpusItem> {
    let n = rng.random_range(1..=max_units.max(1));
    let mut items = Vec::with_capacity(n);
    let mut units = 0;
    let mut i = 0;
    while units < n {
        let roll = rng.random_range(0..10);
        let (modality, duration_s) = match roll {
            0 => (SourceModality::Video, Some(f64::from(rng.random_range(1..=300u32)))),
            1 | 2 => (SourceModality::Image, None),
            _ => (SourceModality::Text, None),
        };
        units += duration_s.map_or(1, |d: f64| (d / 60.0).ceil() as usize);
        items.push(CorpusItem {
            id: format!("item-{i}"),
            modality,
            content: words(rng, 0, 6),
            duration_s,
            asset_ref: format!("asset-{i}"),
        });
        i += 1;
    }
    items
}

/// Random action with a printable-or-not payload, for round-trip checks.
pub fn random_action<R: Rng>(rng: &mut R) -> Action {
    let text = |rng: &mut R, allow_empty: bool| {
        let pool = ["a", "b", " ", "\"", "\\", "\n", "é", "漢", "</tool_call>", "<thinking>", "{", "}", "😀", "0.5"];
        let n = rng.random_range(usize::from(!allow_empty)..8);
        let mut s: String = (0..n).map(|_| *pool.choose(rng).unwrap()).collect();
        if !allow_empty && s.trim().is_empty() {
            s.push('x');
        }
        s
    };
    let titles = |rng: &mut R| (0..rng.random_range(1..4)).map(|_| text(rng, false)).collect::<Vec<_>>();
    match rng.random_range(0..3) {
        0 => Action::Retrieve { title: text(rng, false), parent_titles: titles(rng), query: text(rng, false) },
        1 => Action::Answer { parent_titles: titles(rng), answer: text(rng, false) },
        _ => Action::Memorize {
            summary: text(rng, true),
            decisions: (0..rng.random_range(0..4))
                .map(|_| memgraph_core::MemorizeDecision {
                    information_id: text(rng, false),
                    is_useful: rng.random_bool(0.5),
                    key_timestamps_s: (0..rng.random_range(0..3))
                        .map(|_| f64::from(rng.random_range(0..100_000u32)) / 10.0)
                        .collect(),
                    priority_score: rng.random_range(1..=5),
                })
                .collect(),
        },
    }
}

/// The mask rule evaluated literally as a sum of two indicator products.
pub fn brute_mu(reward: u8, on_path: bool, valuable: bool, terminal: bool) -> u8 {
    if terminal {
        return 0;
    }
    let ind = |b: bool| u8::from(b);
    ind(reward == 1) * ind(!on_path) + ind(reward == 0) * ind(valuable)
}
