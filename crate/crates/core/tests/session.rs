use memgraph_core::protocol::MemorizeDecision;
use memgraph_core::retrieval::SourceModality;
use memgraph_core::runtime::{resume_episode, SessionState};
use memgraph_core::{build_corpus, run_episode, serialize_action, Action, Corpus, CorpusItem, EpisodeConfig, PersistError, ScriptedPolicy};

fn corpus() -> Corpus {
    let item = |id: &str, modality, content: &str, duration_s| CorpusItem {
        id: id.into(),
        modality,
        content: content.into(),
        duration_s,
        asset_ref: id.into(),
    };
    build_corpus(
        vec![
            item("doc-1", SourceModality::Text, "film X premiered at the festival", None),
            item("doc-2", SourceModality::Text, "film X was directed by Y", None),
            item("vid-1", SourceModality::Video, "interview with director Y about film X", Some(150.0)),
        ],
        60.0,
    )
    .unwrap()
}

fn script() -> Vec<String> {
    let retrieve = |t: &str, parents: &[&str], q: &str| {
        serialize_action(
            &Action::Retrieve {
                title: t.into(),
                parent_titles: parents.iter().map(|s| s.to_string()).collect(),
                query: q.into(),
            },
            "looking",
        )
    };
    let memo = |id: &str, ts: Vec<f64>| {
        serialize_action(
            &Action::Memorize {
                summary: format!("kept {id}"),
                decisions: vec![MemorizeDecision { information_id: id.into(), is_useful: true, key_timestamps_s: ts, priority_score: 4 }],
            },
            "",
        )
    };
    vec![
        retrieve("s1", &["root"], "film X director"),
        memo("Text 1", vec![]),
        retrieve("s2", &["s1"], "interview director Y"),
        memo("Video 1", vec![10.0, 31.0]),
        serialize_action(&Action::Answer { parent_titles: vec!["s1".into(), "s2".into()], answer: "Y".into() }, "done"),
    ]
}

#[test]
fn resumed_episode_matches_uninterrupted_run() {
    let corpus = corpus();
    let config = EpisodeConfig::default();
    let full = run_episode(&mut ScriptedPolicy::new(script()), &corpus, "Who directed X?", &config).unwrap();

    let dir = tempdir();
    let path = dir.join("session.json");
    let mut checkpoints = 0;
    // run one cycle, checkpoint, then abandon the in-memory state
    let short = EpisodeConfig { t_max: 1, ..config.clone() };
    resume_episode(&mut ScriptedPolicy::new(script()), &corpus, SessionState::new("Who directed X?").unwrap(), &short, |s| {
        s.save(&path).unwrap();
        checkpoints += 1;
    })
    .unwrap();
    assert_eq!(checkpoints, 1);

    let state = SessionState::load(&path).unwrap();
    assert_eq!(state.records.len(), 1);
    let resumed = resume_episode(&mut ScriptedPolicy::new(script()), &corpus, state, &config, |_| {}).unwrap();
    assert_eq!(resumed.to_jsonl(), full.to_jsonl());
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn save_load_round_trip_and_future_schema() {
    let corpus = corpus();
    let config = EpisodeConfig { t_max: 2, ..Default::default() };
    let mut last = None;
    resume_episode(&mut ScriptedPolicy::new(script()), &corpus, SessionState::new("q").unwrap(), &config, |s| {
        last = Some(s.clone())
    })
    .unwrap();
    let state = last.unwrap();
    let text = state.to_canonical_json();
    let back = SessionState::from_json(&text).unwrap();
    assert_eq!(back.to_canonical_json(), text);
    assert_eq!(back.graph, state.graph);

    let future = text.replacen("\"schema_version\":1", "\"schema_version\":99", 1);
    assert!(matches!(SessionState::from_json(&future), Err(PersistError::SchemaVersion { found: 99, .. })));
    assert!(SessionState::from_json("{not json").is_err());
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("memgraph-session-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
