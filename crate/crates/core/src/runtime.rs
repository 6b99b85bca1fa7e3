//! Episode driver: shape → prompt → act → parse → expand, until an answer or
//! the step bound.

use std::collections::HashSet;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canonical;
use crate::energy::{shape_memory, BudgetAssignment, EnergyError, EnergyParams, Modality, VisualItemSeed};
use crate::graph::{normalize_query, GraphError, MemoryGraph, PersistError};
use crate::protocol::{
    self, parse_response, render_context, render_observation, Action, ParsedResponse, PromptBundle,
    ProtocolError, ProtocolWarning,
};
use crate::retrieval::{resolve_keyframes, search, Corpus, Observation, RetrievalError, SourceModality};

pub const SESSION_SCHEMA_VERSION: u32 = 1;
pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_T_MAX: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Message { role: role.to_string(), content: content.into() }
    }
}

/// What the policy is shown on one call.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub bundle: &'a PromptBundle,
    pub messages: &'a [Message],
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("scripted policy exhausted after {0} responses")]
    Exhausted(usize),
    #[error("policy endpoint: {0}")]
    Transport(String),
    #[error("policy endpoint returned an unusable body: {0}")]
    BadReply(String),
}

pub trait Policy {
    fn act(&mut self, input: &PolicyInput<'_>) -> Result<String, PolicyError>;

    /// Skip the first `calls` responses when resuming a checkpointed episode.
    /// Stateless policies ignore it.
    fn resume_at(&mut self, _calls: u64) {}
}

/// Replays a fixed list of responses in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    responses: Vec<String>,
    #[serde(skip)]
    cursor: usize,
}

impl ScriptedPolicy {
    pub fn new(responses: Vec<String>) -> Self {
        ScriptedPolicy { responses, cursor: 0 }
    }

    /// A script file is a JSON list of response strings.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn position(&self) -> usize {
        self.cursor
    }
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, _input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        let r = self.responses.get(self.cursor).cloned().ok_or(PolicyError::Exhausted(self.cursor))?;
        self.cursor += 1;
        Ok(r)
    }

    fn resume_at(&mut self, calls: u64) {
        self.cursor = usize::try_from(calls).unwrap_or(usize::MAX);
    }
}

/// Settings for a chat-completions style endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointSettings {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable carrying the bearer token. When it is
    /// unset or empty the request goes out unauthenticated.
    pub token_env: String,
    pub timeout_s: u64,
    pub temperature: f64,
    pub max_in_flight: usize,
}

impl Default for EndpointSettings {
    fn default() -> Self {
        EndpointSettings {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "policy".into(),
            token_env: "MEMGRAPH_API_TOKEN".into(),
            timeout_s: 120,
            temperature: 0.0,
            max_in_flight: 4,
        }
    }
}

/// Counting semaphore shared by every client talking to one endpoint.
#[derive(Clone)]
pub struct InflightLimiter {
    inner: Arc<(Mutex<usize>, Condvar)>,
    limit: usize,
}

impl fmt::Debug for InflightLimiter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InflightLimiter").field("limit", &self.limit).finish()
    }
}

struct Permit<'a>(&'a InflightLimiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let (lock, cv) = &*self.0.inner;
        *lock.lock().unwrap_or_else(|e| e.into_inner()) -= 1;
        cv.notify_one();
    }
}

impl InflightLimiter {
    pub fn new(limit: usize) -> Self {
        InflightLimiter { inner: Arc::new((Mutex::new(0), Condvar::new())), limit: limit.max(1) }
    }

    fn acquire(&self) -> Permit<'_> {
        let (lock, cv) = &*self.inner;
        let mut n = lock.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// One request/response pair as sent over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: Value,
    pub response: Option<Value>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
struct ChatClient {
    settings: EndpointSettings,
    http: reqwest::blocking::Client,
    limiter: InflightLimiter,
}

impl ChatClient {
    fn new(settings: EndpointSettings, limiter: InflightLimiter) -> Result<Self, PolicyError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_s.max(1)))
            .build()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        Ok(ChatClient { settings, http, limiter })
    }

    fn complete(&self, messages: &[Message], transcript: &mut Vec<Exchange>) -> Result<String, PolicyError> {
        let request = json!({
            "model": self.settings.model,
            "messages": messages,
            "temperature": self.settings.temperature,
        });
        let url = format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'));
        let mut req = self.http.post(&url).json(&request);
        if !self.settings.token_env.is_empty() {
            match std::env::var(&self.settings.token_env) {
                Ok(token) => req = req.bearer_auth(token),
                Err(_) => tracing::debug!(var = %self.settings.token_env, "no auth token set, sending unauthenticated"),
            }
        }
        let result = {
            let _permit = self.limiter.acquire();
            req.send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json::<Value>())
                .map_err(|e| PolicyError::Transport(e.to_string()))
        };
        match result {
            Ok(body) => {
                let content = body
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_string);
                transcript.push(Exchange { request, response: Some(body.clone()), error: None });
                content.ok_or_else(|| PolicyError::BadReply("missing choices[0].message.content".into()))
            }
            Err(e) => {
                transcript.push(Exchange { request, response: None, error: Some(e.to_string()) });
                Err(e)
            }
        }
    }
}

/// Policy served by a chat-completions endpoint. Every exchange is kept in
/// [`RemotePolicy::transcript`] for audit and replay.
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    client: ChatClient,
    transcript: Vec<Exchange>,
}

impl RemotePolicy {
    pub fn new(settings: EndpointSettings, limiter: InflightLimiter) -> Result<Self, PolicyError> {
        Ok(RemotePolicy { client: ChatClient::new(settings, limiter)?, transcript: Vec::new() })
    }

    pub fn transcript(&self) -> &[Exchange] {
        &self.transcript
    }

    /// Transcript as JSONL.
    pub fn transcript_jsonl(&self) -> String {
        self.transcript
            .iter()
            .map(|e| canonical::to_string(e).expect("exchange serializes") + "\n")
            .collect()
    }
}

impl Policy for RemotePolicy {
    fn act(&mut self, input: &PolicyInput<'_>) -> Result<String, PolicyError> {
        self.client.complete(input.messages, &mut self.transcript)
    }
}

/// Reward judging prompt. The judge must reply `<judge>True</judge>` or
/// `<judge>False</judge>`.
pub const JUDGE_PROMPT: &str = "\
You grade answers to questions. Compare the generated answer with the reference answer and decide whether \
the generated answer is correct. Ignore differences in wording, formatting or extra detail as long as the \
essential facts agree with the reference. Reply with <judge>True</judge> if it is correct and \
<judge>False</judge> otherwise.

Query: {query}
Reference Answer: {reference}
Generated Answer: {answer}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum JudgeMode {
    #[default]
    ExactMatch,
    Remote(EndpointSettings),
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("judge endpoint: {0}")]
    Endpoint(#[from] PolicyError),
    #[error("judge reply has no <judge>True|False</judge> verdict: {0:?}")]
    Unparseable(String),
}

/// Parse `<judge>True</judge>` / `<judge>False</judge>` (case-insensitive verdict).
pub fn parse_judge_verdict(reply: &str) -> Option<u8> {
    let start = reply.find("<judge>")? + "<judge>".len();
    let end = reply[start..].find("</judge>")? + start;
    match reply[start..end].trim().to_ascii_lowercase().as_str() {
        "true" => Some(1),
        "false" => Some(0),
        _ => None,
    }
}

/// Binary reward for `answer` against `gold`.
pub fn judge(query: &str, answer: &str, gold: &str, mode: &JudgeMode) -> Result<u8, JudgeError> {
    match mode {
        JudgeMode::ExactMatch => Ok(u8::from(normalize_query(answer) == normalize_query(gold))),
        JudgeMode::Remote(settings) => {
            let client = ChatClient::new(settings.clone(), InflightLimiter::new(settings.max_in_flight))?;
            let prompt = JUDGE_PROMPT
                .replace("{query}", query)
                .replace("{reference}", gold)
                .replace("{answer}", answer);
            let reply = client.complete(&[Message::new("user", prompt)], &mut Vec::new())?;
            parse_judge_verdict(&reply).ok_or(JudgeError::Unparseable(reply))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub t_max: usize,
    pub energy: EnergyParams,
    pub search_k: usize,
    pub n_frames: usize,
    pub instruction: String,
    pub judge: JudgeMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            t_max: DEFAULT_T_MAX,
            energy: EnergyParams::default(),
            search_k: crate::retrieval::DEFAULT_SEARCH_K,
            n_frames: crate::retrieval::DEFAULT_FRAMES_PER_CLIP,
            instruction: protocol::DEFAULT_INSTRUCTION.to_string(),
            judge: JudgeMode::ExactMatch,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.t_max == 0 {
            return Err(RuntimeError::Config("t_max must be at least 1".into()));
        }
        if self.search_k == 0 {
            return Err(RuntimeError::Config("search_k must be at least 1".into()));
        }
        if self.n_frames == 0 {
            return Err(RuntimeError::Config("n_frames must be at least 1".into()));
        }
        self.energy.validate().map_err(RuntimeError::Energy)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error("illegal transition: expected {expected}, got {got}")]
    IllegalTransition { expected: &'static str, got: &'static str },
    #[error("policy protocol error at cycle {cycle}: {source}")]
    PolicyProtocol {
        cycle: usize,
        #[source]
        source: Box<RuntimeError>,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Energy(EnergyError),
    #[error("policy failed at cycle {cycle}: {source}")]
    Policy { cycle: usize, source: PolicyError },
    #[error("environment error at step {step}: {source}")]
    Environment { step: u64, source: RetrievalError },
    #[error("session file: {0}")]
    Persist(#[from] PersistError),
    #[error("episode already finished")]
    Finished,
}

impl RuntimeError {
    /// Errors a policy can fix by answering again.
    fn is_retryable(&self) -> bool {
        matches!(
            self,
            RuntimeError::Protocol(_) | RuntimeError::Graph(_) | RuntimeError::IllegalTransition { .. }
        )
    }
}

fn action_label(a: &Action) -> &'static str {
    match a {
        Action::Retrieve { .. } => "retrieve",
        Action::Memorize { .. } => "memorize",
        Action::Answer { .. } => "answer",
    }
}

/// A search node waiting for its memorize call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRetrieve {
    pub node_index: usize,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    /// Graph step at which memory was shaped for this cycle's prompt.
    pub step: u64,
    pub prompt_hash: String,
    pub prompt_chars: usize,
    pub response: String,
    pub thinking: String,
    pub action: Action,
    pub warnings: Vec<ProtocolWarning>,
    /// Node created by this cycle.
    pub node_index: usize,
    pub observations: Vec<Observation>,
    pub memorize_prompt_chars: usize,
    pub memorize_response: Option<String>,
    pub memorize_action: Option<Action>,
    pub seeded_items: Vec<usize>,
    pub assignment: BudgetAssignment,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Answered { answer: String },
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: String,
    pub records: Vec<CycleRecord>,
    pub final_graph: MemoryGraph,
    pub outcome: Outcome,
    pub reward: Option<u8>,
    pub judge_error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported trajectory schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TrajectoryLine {
    Header { schema_version: u32, query: String },
    Cycle(Box<CycleRecord>),
    Final {
        graph: MemoryGraph,
        outcome: Outcome,
        reward: Option<u8>,
        judge_error: Option<String>,
    },
}

#[derive(Deserialize)]
struct FinalLine {
    graph: MemoryGraph,
    outcome: Outcome,
    reward: Option<u8>,
    judge_error: Option<String>,
}

// Internally tagged enums buffer their content, which loses integer map keys;
// dispatch on `kind` by hand instead.
fn parse_line(line: &str) -> Result<TrajectoryLine, serde_json::Error> {
    use serde::de::Error as _;
    let mut v: Value = serde_json::from_str(line)?;
    let kind = v
        .as_object_mut()
        .and_then(|o| o.remove("kind"))
        .and_then(|k| k.as_str().map(str::to_string))
        .ok_or_else(|| serde_json::Error::custom("missing `kind`"))?;
    Ok(match kind.as_str() {
        "header" => {
            let schema_version = v.get("schema_version").and_then(Value::as_u64).unwrap_or(0);
            let query = v.get("query").and_then(Value::as_str).unwrap_or_default().to_string();
            TrajectoryLine::Header { schema_version: u32::try_from(schema_version).unwrap_or(u32::MAX), query }
        }
        "cycle" => TrajectoryLine::Cycle(Box::new(serde_json::from_value(v)?)),
        "final" => {
            let f: FinalLine = serde_json::from_value(v)?;
            TrajectoryLine::Final { graph: f.graph, outcome: f.outcome, reward: f.reward, judge_error: f.judge_error }
        }
        other => return Err(serde_json::Error::custom(format!("unknown record kind `{other}`"))),
    })
}

impl Trajectory {
    pub fn answer(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Answered { answer } => Some(answer),
            Outcome::Truncated => None,
        }
    }

    pub fn is_truncated(&self) -> bool {
        self.outcome == Outcome::Truncated
    }

    /// Judge the answer against `gold`. Truncated episodes get no verdict;
    /// judge failures leave the reward unset and record the error.
    pub fn judge(&mut self, gold: &str, mode: &JudgeMode) {
        match self.answer() {
            None => self.reward = None,
            Some(answer) => match judge(&self.query, answer, gold, mode) {
                Ok(r) => self.reward = Some(r),
                Err(e) => {
                    tracing::warn!(error = %e, "judge failed, reward left unset");
                    self.reward = None;
                    self.judge_error = Some(e.to_string());
                }
            },
        }
    }

    /// Line-delimited export: a header, one line per cycle, then the final graph.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![TrajectoryLine::Header {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            query: self.query.clone(),
        }];
        lines.extend(self.records.iter().cloned().map(|r| TrajectoryLine::Cycle(Box::new(r))));
        lines.push(TrajectoryLine::Final {
            graph: self.final_graph.clone(),
            outcome: self.outcome.clone(),
            reward: self.reward,
            judge_error: self.judge_error.clone(),
        });
        lines
            .iter()
            .map(|l| canonical::to_string(l).expect("trajectory serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TrajectoryError> {
        let mut query = None;
        let mut records = Vec::new();
        let mut tail = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |message: String| TrajectoryError::Format { line: n + 1, message };
            let parsed = parse_line(line).map_err(|e| err(e.to_string()))?;
            match parsed {
                TrajectoryLine::Header { schema_version, query: q } => {
                    if schema_version != TRAJECTORY_SCHEMA_VERSION {
                        return Err(TrajectoryError::SchemaVersion {
                            found: schema_version,
                            expected: TRAJECTORY_SCHEMA_VERSION,
                        });
                    }
                    if query.replace(q).is_some() {
                        return Err(err("second header".into()));
                    }
                }
                _ if query.is_none() => return Err(err("missing header".into())),
                _ if tail.is_some() => return Err(err("content after final record".into())),
                TrajectoryLine::Cycle(r) => records.push(*r),
                TrajectoryLine::Final { graph, outcome, reward, judge_error } => {
                    tail = Some((graph, outcome, reward, judge_error));
                }
            }
        }
        let query = query.ok_or(TrajectoryError::Format { line: 0, message: "empty file".into() })?;
        let (final_graph, outcome, reward, judge_error) =
            tail.ok_or(TrajectoryError::Format { line: 0, message: "missing final record".into() })?;
        Ok(Trajectory { query, records, final_graph, outcome, reward, judge_error })
    }
}

/// Checkpointable episode state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub schema_version: u32,
    pub graph: MemoryGraph,
    pub records: Vec<CycleRecord>,
    pub pending: Option<PendingRetrieve>,
    /// Policy responses consumed so far, retries included.
    pub policy_calls: u64,
}

impl SessionState {
    pub fn new(query: &str) -> Result<Self, RuntimeError> {
        Ok(SessionState {
            schema_version: SESSION_SCHEMA_VERSION,
            graph: MemoryGraph::new(query)?,
            records: Vec::new(),
            pending: None,
            policy_calls: 0,
        })
    }

    pub fn is_finished(&self, config: &EpisodeConfig) -> bool {
        self.graph.is_terminal() || self.records.len() >= config.t_max
    }

    pub fn to_canonical_json(&self) -> String {
        canonical::to_string(self).expect("session serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PersistError> {
        let v: Value = serde_json::from_str(text)?;
        let found = v.get("schema_version").and_then(Value::as_u64).unwrap_or(0);
        if found != u64::from(SESSION_SCHEMA_VERSION) {
            return Err(PersistError::SchemaVersion {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: SESSION_SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PersistError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_canonical_json())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PersistError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn into_trajectory(self) -> Trajectory {
        let outcome = match self.graph.answer_index().and_then(|i| self.graph.nodes()[i].answer_text.clone()) {
            Some(answer) => Outcome::Answered { answer },
            None => Outcome::Truncated,
        };
        Trajectory {
            query: self.graph.root_query().to_string(),
            records: self.records,
            final_graph: self.graph,
            outcome,
            reward: None,
            judge_error: None,
        }
    }
}

/// Effect of one applied action.
#[derive(Debug, Clone, PartialEq)]
pub enum Transition {
    Retrieved { node_index: usize },
    Memorized { node_index: usize, items: Vec<usize> },
    Answered { node_index: usize },
}

/// Apply one parsed action. The state is left untouched on error.
///
/// Legal sequences follow `(Retrieve Memorize)* Answer?`.
pub fn apply_action(
    state: &mut SessionState,
    action: &Action,
    corpus: &Corpus,
    config: &EpisodeConfig,
) -> Result<Transition, RuntimeError> {
    let got = action_label(action);
    if state.graph.is_terminal() {
        return Err(RuntimeError::IllegalTransition { expected: "nothing (graph is terminal)", got });
    }
    match (action, &state.pending) {
        (Action::Memorize { .. }, None) => Err(RuntimeError::IllegalTransition { expected: "retrieve or answer", got }),
        (Action::Retrieve { .. } | Action::Answer { .. }, Some(_)) => {
            Err(RuntimeError::IllegalTransition { expected: "memorize", got })
        }
        (Action::Retrieve { title, parent_titles, query }, None) => {
            let mut graph = state.graph.clone();
            let node_index = graph.add_search_node(title, parent_titles, query)?;
            let observations = search(corpus, query, config.search_k, config.n_frames)
                .map_err(|source| RuntimeError::Environment { step: graph.step(), source })?;
            state.graph = graph;
            state.pending = Some(PendingRetrieve { node_index, observations });
            Ok(Transition::Retrieved { node_index })
        }
        (Action::Memorize { summary, decisions }, Some(pending)) => {
            let mut seen = HashSet::new();
            for d in decisions {
                if !pending.observations.iter().any(|o| o.id == d.information_id) {
                    return Err(ProtocolError::SchemaViolation {
                        field: "information_id".into(),
                        reason: format!("`{}` was not offered", d.information_id),
                    }
                    .into());
                }
                if !seen.insert(d.information_id.as_str()) {
                    return Err(ProtocolError::SchemaViolation {
                        field: "information_id".into(),
                        reason: format!("`{}` graded twice", d.information_id),
                    }
                    .into());
                }
            }
            let node_index = pending.node_index;
            let mut graph = state.graph.clone();
            let mut items = Vec::new();
            for d in decisions.iter().filter(|d| d.is_useful) {
                let obs = pending
                    .observations
                    .iter()
                    .find(|o| o.id == d.information_id)
                    .expect("checked above");
                for seed in seeds_for(obs, &d.key_timestamps_s, d.priority_score) {
                    items.push(graph.add_item(node_index, seed)?);
                }
            }
            graph.populate_node(node_index, summary, &items)?;
            state.graph = graph;
            state.pending = None;
            Ok(Transition::Memorized { node_index, items })
        }
        (Action::Answer { parent_titles, answer }, None) => {
            let node_index = state.graph.add_answer_node(parent_titles, answer)?;
            Ok(Transition::Answered { node_index })
        }
    }
}

/// One seed per useful text or image; one per resolved keyframe for video.
fn seeds_for(obs: &Observation, key_timestamps_s: &[f64], priority: u8) -> Vec<VisualItemSeed> {
    let whole = |modality| VisualItemSeed {
        modality,
        payload_ref: obs.asset_ref.clone(),
        source_timestamp_s: None,
        saliency: true,
        priority,
    };
    match obs.modality {
        SourceModality::Text => vec![whole(Modality::Text)],
        SourceModality::Image => vec![whole(Modality::Image)],
        SourceModality::Video => resolve_keyframes(obs, key_timestamps_s, priority).seeds,
    }
}

/// Call the policy, parse and apply; on a fixable failure, remind it of the
/// format once and try again.
fn act_with_retry(
    policy: &mut dyn Policy,
    state: &mut SessionState,
    bundle: &PromptBundle,
    messages: &mut Vec<Message>,
    corpus: &Corpus,
    config: &EpisodeConfig,
    cycle: usize,
) -> Result<(ParsedResponse, Transition, u32), RuntimeError> {
    let mut retries = 0;
    loop {
        let raw = policy
            .act(&PolicyInput { bundle, messages })
            .map_err(|source| RuntimeError::Policy { cycle, source })?;
        state.policy_calls += 1;
        let attempt = parse_response(raw.as_bytes())
            .map_err(RuntimeError::from)
            .and_then(|parsed| apply_action(state, &parsed.action, corpus, config).map(|t| (parsed, t)));
        match attempt {
            Ok((parsed, t)) => {
                messages.push(Message::new("assistant", raw));
                return Ok((parsed, t, retries));
            }
            Err(e) if e.is_retryable() && retries == 0 => {
                tracing::warn!(cycle, error = %e, "unusable policy reply, retrying once");
                retries += 1;
                messages.push(Message::new("assistant", raw));
                messages.push(Message::new("user", format!("{}\nProblem: {e}", protocol::FORMAT_REMINDER)));
            }
            Err(e) if e.is_retryable() => {
                return Err(RuntimeError::PolicyProtocol { cycle, source: Box::new(e) });
            }
            Err(e) => return Err(e),
        }
    }
}

/// Run one full cycle: shape, prompt, act and (for a retrieval) memorize.
pub fn run_cycle(
    policy: &mut dyn Policy,
    corpus: &Corpus,
    state: &mut SessionState,
    config: &EpisodeConfig,
) -> Result<(), RuntimeError> {
    if state.is_finished(config) {
        return Err(RuntimeError::Finished);
    }
    if state.pending.is_some() {
        return Err(RuntimeError::IllegalTransition { expected: "memorize", got: "new cycle" });
    }
    let cycle = state.records.len() + 1;
    let assignment = shape_memory(&mut state.graph, &config.energy);
    let bundle = render_context(&state.graph, &assignment, &config.instruction)?;
    debug_assert_eq!(bundle.step, assignment.evaluation_step);
    let mut messages = vec![Message::new("system", bundle.instruction.clone()), Message::new("user", bundle.user_prompt())];

    // Work on a copy so a failed cycle leaves the checkpoint untouched.
    let mut next = state.clone();
    let (parsed, transition, mut retries) =
        act_with_retry(policy, &mut next, &bundle, &mut messages, corpus, config, cycle)?;
    let mut record = CycleRecord {
        cycle,
        step: assignment.evaluation_step,
        prompt_hash: bundle.digest(),
        prompt_chars: bundle.rendered_chars(),
        response: parsed.raw,
        thinking: parsed.thinking,
        action: parsed.action,
        warnings: parsed.warnings,
        node_index: 0,
        observations: Vec::new(),
        memorize_prompt_chars: 0,
        memorize_response: None,
        memorize_action: None,
        seeded_items: Vec::new(),
        assignment,
        retries: 0,
    };
    match transition {
        Transition::Answered { node_index } => record.node_index = node_index,
        Transition::Retrieved { node_index } => {
            record.node_index = node_index;
            let observations = next.pending.as_ref().map(|p| p.observations.clone()).unwrap_or_default();
            let block = render_observation(&observations);
            let memo_prompt = format!("{}\n{}", block.text, protocol::MEMORIZE_INSTRUCTION);
            record.memorize_prompt_chars = memo_prompt.chars().count();
            messages.push(Message::new("user", memo_prompt));
            let (memo, t, memo_retries) =
                act_with_retry(policy, &mut next, &bundle, &mut messages, corpus, config, cycle)?;
            if let Transition::Memorized { items, .. } = t {
                record.seeded_items = items;
            }
            retries += memo_retries;
            record.warnings.extend(memo.warnings);
            record.memorize_response = Some(memo.raw);
            record.memorize_action = Some(memo.action);
            record.observations = observations;
        }
        Transition::Memorized { .. } => unreachable!("a cycle never opens with memorize"),
    }
    record.retries = retries;
    next.records.push(record);
    *state = next;
    Ok(())
}

/// Continue an episode from `state` until it answers or hits `t_max`.
/// `checkpoint` sees the state after every completed cycle.
pub fn resume_episode(
    policy: &mut dyn Policy,
    corpus: &Corpus,
    mut state: SessionState,
    config: &EpisodeConfig,
    mut checkpoint: impl FnMut(&SessionState),
) -> Result<Trajectory, RuntimeError> {
    config.validate()?;
    policy.resume_at(state.policy_calls);
    while !state.is_finished(config) {
        run_cycle(policy, corpus, &mut state, config)?;
        checkpoint(&state);
    }
    Ok(state.into_trajectory())
}

pub fn run_episode(
    policy: &mut dyn Policy,
    corpus: &Corpus,
    query: &str,
    config: &EpisodeConfig,
) -> Result<Trajectory, RuntimeError> {
    resume_episode(policy, corpus, SessionState::new(query)?, config, |_| {})
}
