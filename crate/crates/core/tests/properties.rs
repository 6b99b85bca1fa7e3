mod common;

use std::collections::BTreeSet;

use memgraph_core::ggpo::{clipped_term, prepare_group, MaskTag};
use memgraph_core::graph::NodeKind;
use memgraph_core::retrieval::{sample_frames, segment_video, Clip};
use memgraph_core::runtime::{EpisodeConfig, ScriptedPolicy};
use memgraph_core::{
    allocate_budget, build_corpus, group_advantage, masked_objective, parse_response, pruning_mask, recursive_energy,
    run_episode, search, select_top_k, serialize_action, shape_memory, Action, EnergyParams, MemoryGraph,
    ObjectiveInputs, TrajectorySegment,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn energy_matches_definition(seed in any::<u64>(), lambda in 0.0f64..1.0, gamma in 0.0f64..1.0) {
        let mut r = rng(seed);
        let n = r.random_range(0..12);
        let answer = r.random_bool(0.5);
        let g = common::random_graph(&mut r, n, 4, answer);
        let params = EnergyParams { lambda_decay: lambda, gamma_feedback: gamma, ..Default::default() };
        let fast = recursive_energy(&g, &params);
        let slow = common::naive_energy(&g, &params);
        prop_assert_eq!(fast.items.len(), slow.len());
        for e in &fast.items {
            prop_assert!((e.total - slow[&e.ordinal]).abs() <= 1e-9);
        }
    }

    #[test]
    fn budgets_conserve_and_follow_energy(seed in any::<u64>(), s_total in 1u64..5_000_000, k in 1usize..10) {
        let mut r = rng(seed);
        let n = r.random_range(1..10);
        let mut g = common::random_graph(&mut r, n, 4, false);
        let params = EnergyParams { s_total, top_k: k, ..Default::default() };
        let fresh = g.clone();
        let a = shape_memory(&mut g, &params);
        prop_assert!(a.total() <= s_total);
        prop_assert_eq!(a.total() + a.slack, s_total);
        prop_assert!(a.retained.len() <= k);
        // allocation is monotone in the energies it was given
        let report = recursive_energy(&fresh, &params);
        let retained = select_top_k(&report, &params);
        let b = allocate_budget(&retained, &report, &params);
        prop_assert!(b.total() <= s_total);
        for &x in &retained {
            for &y in &retained {
                let (ex, ey) = (report.get(x).unwrap().total, report.get(y).unwrap().total);
                if ex > ey {
                    prop_assert!(b.budgets[&x] >= b.budgets[&y]);
                }
            }
        }
        // every live item is either retained with its budget or evicted
        for item in g.memory_bank() {
            match a.budgets.get(&item.ordinal) {
                Some(&b) => prop_assert_eq!(item.allocated_budget, b),
                None => prop_assert!(item.dropped() || !g.node(item.owner_node).unwrap().populated),
            }
        }
    }

    #[test]
    fn shaping_is_idempotent_within_a_step(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(1..8);
        let mut g = common::random_graph(&mut r, n, 3, false);
        let params = EnergyParams { top_k: r.random_range(1..6), ..Default::default() };
        let a1 = shape_memory(&mut g, &params);
        let snapshot = g.clone();
        let a2 = shape_memory(&mut g, &params);
        prop_assert_eq!(a1, a2);
        prop_assert_eq!(snapshot, g);
    }

    #[test]
    fn uniform_mode_splits_evenly(seed in any::<u64>(), s_total in 1u64..10_000_000) {
        let mut r = rng(seed);
        let g = common::random_graph(&mut r, 5, 3, false);
        let params = EnergyParams { s_total, uniform_mode: true, ..Default::default() };
        let report = recursive_energy(&g, &params);
        let retained = select_top_k(&report, &params);
        let a = allocate_budget(&retained, &report, &params);
        if !retained.is_empty() {
            let each = s_total / retained.len() as u64;
            prop_assert!(a.budgets.values().all(|&b| b == each));
        }
    }

    #[test]
    fn action_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let action = common::random_action(&mut r);
        let text = serialize_action(&action, "plan </thinking> <tool_call>");
        let parsed = parse_response(text.as_bytes()).unwrap();
        prop_assert_eq!(parsed.action, action);
        prop_assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn parser_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_response(&bytes);
    }

    #[test]
    fn parser_is_total_near_valid_input(seed in any::<u64>(), cut in 0usize..400, flip in any::<u8>()) {
        let mut r = rng(seed);
        let mut bytes = serialize_action(&common::random_action(&mut r), "t").into_bytes();
        if !bytes.is_empty() {
            let i = cut % bytes.len();
            bytes[i] ^= flip;
            bytes.truncate(cut.max(i + 1));
        }
        let _ = parse_response(&bytes);
    }

    #[test]
    fn clips_tile_the_video(duration in 0.001f64..10_000.0, clip_len in 0.5f64..300.0) {
        let clips = segment_video(duration, clip_len);
        prop_assert!(!clips.is_empty());
        prop_assert_eq!(clips[0].0, 0.0);
        prop_assert_eq!(clips.last().unwrap().1, duration);
        for w in clips.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
        }
        for c in &clips {
            prop_assert!(c.0 < c.1 && c.1 - c.0 <= clip_len + 1e-9);
        }
    }

    #[test]
    fn frames_increase_within_clip(start in 0.0f64..1000.0, len in 0.01f64..120.0, n in 1usize..32) {
        let clip = Clip { source: 0, source_id: "v".into(), start_s: start, end_s: start + len };
        let frames = sample_frames(&clip, n);
        prop_assert_eq!(frames.len(), n);
        prop_assert_eq!(frames[0].timestamp_s, start);
        for w in frames.windows(2) {
            prop_assert!(w[0].timestamp_s < w[1].timestamp_s);
        }
        prop_assert!(frames.iter().all(|f| f.timestamp_s >= clip.start_s && f.timestamp_s < clip.end_s));
    }

    #[test]
    fn search_matches_exhaustive_oracle(seed in any::<u64>(), k in 1usize..12) {
        let mut r = rng(seed);
        let items = common::random_corpus_items(&mut r, 60);
        let corpus = build_corpus(items, 60.0).unwrap();
        let query = common::words(&mut r, 1, 4);
        match search(&corpus, &query, k, 4) {
            Ok(hits) => {
                let got: Vec<_> = hits.iter().map(common::observation_key).collect();
                prop_assert_eq!(got, common::oracle_search(&corpus, &query, k));
                prop_assert_eq!(&hits, &search(&corpus, &query, k, 4).unwrap());
            }
            Err(_) => prop_assert!(corpus.indexed_units() == 0),
        }
    }

    #[test]
    fn legal_actions_keep_the_graph_sound(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut g = MemoryGraph::new("q").unwrap();
        for _ in 0..r.random_range(1..25) {
            let n = g.len();
            if g.is_terminal() {
                let before = g.clone();
                prop_assert!(g.add_search_node("late", &["root"], "q").is_err());
                prop_assert!(g.add_answer_node(&["root"], "again").is_err());
                prop_assert_eq!(before, g);
                break;
            }
            let parents = common::random_parents(&mut r, n);
            if r.random_bool(0.1) {
                g.add_answer_node(&parents, "a").unwrap();
            } else {
                let idx = g.add_search_node(&format!("s{n}"), &parents, "query").unwrap();
                let items: Vec<usize> = (0..r.random_range(0..3))
                    .map(|k| g.add_item(idx, common::random_seed(&mut r, idx, k)).unwrap())
                    .collect();
                g.populate_node(idx, "sum", &items).unwrap();
            }
            for node in g.nodes() {
                prop_assert!(node.parent_indices.iter().all(|&p| p < node.index));
            }
            prop_assert!(g.validate().is_ok());
            prop_assert_eq!(g.critical_path(), common::reachability_critical_path(&g));
        }
    }

    #[test]
    fn graph_persistence_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(0..8);
        let answer = r.random_bool(0.5);
        let mut g = common::random_graph(&mut r, n, 3, answer);
        shape_memory(&mut g, &EnergyParams { top_k: 2, ..Default::default() });
        let text = g.to_canonical_json();
        let back = MemoryGraph::from_json(&text).unwrap();
        prop_assert_eq!(back.to_canonical_json(), text);
        prop_assert_eq!(back.linearize(), g.linearize());
    }

    #[test]
    fn mask_matches_indicator_rule(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(0..10);
        let answer = r.random_bool(0.7);
        let g = common::random_graph(&mut r, n, 0, answer);
        let path = g.critical_path();
        let r_val: BTreeSet<usize> = (1..=n).filter(|_| r.random_bool(0.3)).collect();
        let mut segments: Vec<TrajectorySegment> = (1..=n)
            .map(|v| TrajectorySegment { rollout_id: 0, segment_index: v - 1, node_index: v, terminal: false, prompt_ref: String::new(), spans: vec![] })
            .collect();
        if let Some(a) = g.answer_index() {
            segments.push(TrajectorySegment { rollout_id: 0, segment_index: n, node_index: a, terminal: true, prompt_ref: String::new(), spans: vec![] });
        }
        for reward in [0u8, 1] {
            let m = pruning_mask(&segments, reward, &path, &r_val).unwrap();
            for (s, e) in segments.iter().zip(&m.entries) {
                prop_assert_eq!(e.mu, common::brute_mu(reward, path.contains(&s.node_index), r_val.contains(&s.node_index), s.terminal));
                prop_assert!(e.mu <= 1);
                if reward == 1 { prop_assert!(e.tag != MaskTag::ValuableNegative); }
                if reward == 0 { prop_assert!(e.tag != MaskTag::DeadEndPositive); }
                if e.tag == MaskTag::DeadEndPositive { prop_assert!(!g.critical_path().contains(&s.node_index)); }
            }
        }
    }

    #[test]
    fn objective_gating(seed in any::<u64>(), eps in 0.01f64..0.99) {
        let mut r = rng(seed);
        let groups = r.random_range(1..5);
        let mut masks = Vec::new();
        let mut ratios = Vec::new();
        let mut advs = Vec::new();
        for _ in 0..groups {
            let n = r.random_range(1..6);
            let segs: Vec<TrajectorySegment> = (0..n)
                .map(|i| TrajectorySegment { rollout_id: 0, segment_index: i, node_index: i + 1, terminal: false, prompt_ref: String::new(), spans: vec![] })
                .collect();
            masks.push(pruning_mask(&segs, 0, &BTreeSet::new(), &BTreeSet::new()).unwrap());
            ratios.push((0..n).map(|_| r.random_range(0.05..3.0)).collect::<Vec<f64>>());
            advs.push((0..n).map(|_| r.random_range(-3.0..3.0)).collect::<Vec<f64>>());
        }
        let inputs = ObjectiveInputs { ratios: ratios.clone(), advantages: advs.clone(), clip_eps: eps };
        let total_n: usize = masks.iter().map(|m| m.entries.len()).sum();
        let plain: f64 = ratios.iter().flatten().zip(advs.iter().flatten()).map(|(&r, &a)| clipped_term(r, a, eps)).sum::<f64>() / total_n as f64;
        let base = masked_objective(&inputs, &masks).unwrap();
        prop_assert!((base - plain).abs() <= 1e-12);

        let g = r.random_range(0..groups);
        let i = r.random_range(0..masks[g].entries.len());
        let mut flipped = masks.clone();
        flipped[g].entries[i].mu = 1;
        let delta = base - masked_objective(&inputs, &flipped).unwrap();
        prop_assert!((delta - clipped_term(ratios[g][i], advs[g][i], eps) / total_n as f64).abs() <= 1e-12);

        for m in &mut flipped {
            for e in &mut m.entries { e.mu = 1; }
        }
        prop_assert_eq!(masked_objective(&inputs, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn advantages_are_centered(rewards in proptest::collection::vec(0u8..=1, 1..16)) {
        let a = group_advantage(&rewards);
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        for (x, y) in rewards.iter().zip(&a) {
            for (u, v) in rewards.iter().zip(&a) {
                if x == u { prop_assert_eq!(y, v); }
            }
        }
    }
}

#[test]
fn advantage_is_broadcast_over_segments() {
    let corpus = build_corpus(
        vec![memgraph_core::CorpusItem {
            id: "d".into(),
            modality: memgraph_core::retrieval::SourceModality::Text,
            content: "film director".into(),
            duration_s: None,
            asset_ref: "d".into(),
        }],
        60.0,
    )
    .unwrap();
    let search = |t: &str| {
        serialize_action(&Action::Retrieve { title: t.into(), parent_titles: vec!["root".into()], query: "film".into() }, "")
    };
    let memo = serialize_action(&Action::Memorize { summary: "s".into(), decisions: vec![] }, "");
    let answer = |a: &str| serialize_action(&Action::Answer { parent_titles: vec!["a".into()], answer: a.into() }, "");
    let mut rollouts = Vec::new();
    for (ans, gold_hit) in [("Y", true), ("Z", false)] {
        let mut p = ScriptedPolicy::new(vec![search("a"), memo.clone(), search("b"), memo.clone(), answer(ans)]);
        let mut t = run_episode(&mut p, &corpus, "q", &EpisodeConfig::default()).unwrap();
        t.judge("y", &memgraph_core::JudgeMode::ExactMatch);
        assert_eq!(t.reward, Some(u8::from(gold_hit)));
        rollouts.push(t);
    }
    let group = prepare_group(&rollouts, &["d".to_string()].into()).unwrap();
    for r in &group.rollouts {
        assert_eq!(r.segments.len(), 3);
        assert!(r.segments.last().unwrap().terminal);
    }
    assert_eq!(group.rollouts[0].advantage, 1.0);
    assert_eq!(group.rollouts[1].advantage, -1.0);
    // positive rollout: "b" is a dead end; negative: both searches hit gold
    assert_eq!(group.rollouts[0].mask.mu(), vec![0, 1, 0]);
    assert_eq!(group.rollouts[1].mask.mu(), vec![1, 1, 0]);
    assert!(rollouts[0].final_graph.nodes().iter().any(|n| n.kind == NodeKind::Answer));
}
