//! Seeded workloads shared by the benchmarks.

use memgraph_core::retrieval::SourceModality;
use memgraph_core::{build_corpus, Corpus, CorpusItem, MemoryGraph, Modality, VisualItemSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "film", "director", "award", "river", "city", "engine", "red", "blue", "car", "sky", "museum",
    "painting", "bridge", "festival", "interview", "harbor", "station", "mountain", "novel", "album",
];

fn sentence(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// A populated graph with `nodes` search nodes carrying `items_per_node`
/// items each. Every node has one to three earlier parents.
pub fn random_graph(seed: u64, nodes: usize, items_per_node: usize) -> MemoryGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = MemoryGraph::new("benchmark query").expect("non-empty query");
    for i in 1..=nodes {
        let mut parents: Vec<String> = (0..rng.random_range(1..=3usize))
            .map(|_| match rng.random_range(0..i) {
                0 => "root".to_string(),
                p => format!("n{p}"),
            })
            .collect();
        parents.sort();
        parents.dedup();
        let idx = g.add_search_node(&format!("n{i}"), &parents, &sentence(&mut rng, 4)).expect("legal node");
        let items: Vec<usize> = (0..items_per_node)
            .map(|k| {
                let seed = VisualItemSeed {
                    modality: Modality::Image,
                    payload_ref: format!("img-{i}-{k}"),
                    source_timestamp_s: None,
                    saliency: rng.random_bool(0.9),
                    priority: rng.random_range(1..=5),
                };
                g.add_item(idx, seed).expect("legal item")
            })
            .collect();
        g.populate_node(idx, "summary", &items).expect("legal populate");
    }
    g
}

/// `docs` text documents plus a handful of videos.
pub fn random_corpus(seed: u64, docs: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<CorpusItem> = (0..docs)
        .map(|i| CorpusItem {
            id: format!("doc-{i}"),
            modality: SourceModality::Text,
            content: sentence(&mut rng, 12),
            duration_s: None,
            asset_ref: format!("doc-{i}"),
        })
        .collect();
    items.extend((0..docs / 50).map(|i| CorpusItem {
        id: format!("vid-{i}"),
        modality: SourceModality::Video,
        content: sentence(&mut rng, 8),
        duration_s: Some(rng.random_range(30.0..600.0)),
        asset_ref: format!("vid-{i}.mp4"),
    }));
    build_corpus(items, 60.0).expect("unique ids")
}
