//! The policy's wire protocol.
//!
//! A reply is an optional `<thinking>...</thinking>` block followed by exactly
//! one `<tool_call>...</tool_call>` block whose body is a JSON object
//! `{"name": ..., "arguments": {...}}`. Three tools exist:
//!
//! | tool                    | arguments                                  |
//! |-------------------------|--------------------------------------------|
//! | `add_search_node`       | `id`, `parent_ids`, `query`                |
//! | `summarize_and_memorize`| `summarize`, `memorize: [decision...]`     |
//! | `add_answer_node`       | `parent_ids`, `answer`                     |
//!
//! A memorize decision is `{information_id, is_useful, key_timestamp, priority_score}`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::canonical;
use crate::energy::BudgetAssignment;
use crate::graph::{LinearizedContext, MemoryGraph};
use crate::retrieval::{Observation, SourceModality};

pub const TOOL_SEARCH: &str = "add_search_node";
pub const TOOL_MEMORIZE: &str = "summarize_and_memorize";
pub const TOOL_ANSWER: &str = "add_answer_node";

const OPEN_THINKING: &str = "<thinking>";
const CLOSE_THINKING: &str = "</thinking>";
const OPEN_CALL: &str = "<tool_call>";
const CLOSE_CALL: &str = "</tool_call>";

/// Default system instruction describing the graph-building protocol.
pub const DEFAULT_INSTRUCTION: &str = "\
You answer the user's question by building a directed acyclic graph of search steps.
The graph starts with a node titled \"root\" holding the question. Each turn you add exactly one node:
- add_search_node {\"id\": short unique title, \"parent_ids\": [titles this search builds on], \"query\": search string}
  Use a query that differs from every earlier query.
- add_answer_node {\"parent_ids\": [titles whose findings support the answer], \"answer\": final answer}
After every search you receive the results and must call
- summarize_and_memorize {\"summarize\": short summary of what was learned, \"memorize\": [{\"information_id\": e.g. \"Text 1\", \"is_useful\": bool, \"key_timestamp\": [seconds, videos only], \"priority_score\": 1-5}]}
  Call it even when nothing useful came back, listing every result.
Reply with your reasoning inside <thinking></thinking> followed by one JSON object {\"name\": tool, \"arguments\": {...}} inside <tool_call></tool_call>.";

/// Appended to the conversation before the memorize turn.
pub const MEMORIZE_INSTRUCTION: &str = "\
Search results for the latest search node are below. Close the search with summarize_and_memorize:
keep to facts that bear on the question, at most three sentences, nothing already stated in earlier nodes,
and grade every listed result (is_useful, priority_score 1-5, key_timestamp for useful video moments).";

/// Sent after an unparseable reply.
pub const FORMAT_REMINDER: &str = "\
Your previous reply could not be used. Reply again with <thinking>...</thinking> followed by exactly one \
<tool_call>{\"name\": ..., \"arguments\": {...}}</tool_call> using one of the allowed tools.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizeDecision {
    pub information_id: String,
    pub is_useful: bool,
    /// Seconds, carried at 0.1 s resolution.
    pub key_timestamps_s: Vec<f64>,
    pub priority_score: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Retrieve {
        title: String,
        parent_titles: Vec<String>,
        query: String,
    },
    Memorize {
        summary: String,
        decisions: Vec<MemorizeDecision>,
    },
    Answer {
        parent_titles: Vec<String>,
        answer: String,
    },
}

impl Action {
    pub fn tool_name(&self) -> &'static str {
        match self {
            Action::Retrieve { .. } => TOOL_SEARCH,
            Action::Memorize { .. } => TOOL_MEMORIZE,
            Action::Answer { .. } => TOOL_ANSWER,
        }
    }

    fn arguments(&self) -> Value {
        match self {
            Action::Retrieve { title, parent_titles, query } => {
                json!({"id": title, "parent_ids": parent_titles, "query": query})
            }
            Action::Answer { parent_titles, answer } => {
                json!({"parent_ids": parent_titles, "answer": answer})
            }
            Action::Memorize { summary, decisions } => {
                let memorize: Vec<Value> = decisions
                    .iter()
                    .map(|d| {
                        let ts: Vec<f64> = d.key_timestamps_s.iter().map(|&t| round_tenths(t)).collect();
                        json!({
                            "information_id": d.information_id,
                            "is_useful": d.is_useful,
                            "key_timestamp": ts,
                            "priority_score": d.priority_score,
                        })
                    })
                    .collect();
                json!({"summarize": summary, "memorize": memorize})
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolWarning {
    MissingThinking,
    TrailingText,
    PriorityClamped { information_id: String, raw: f64, used: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub thinking: String,
    pub action: Action,
    pub raw: String,
    pub warnings: Vec<ProtocolWarning>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("response contains no <tool_call> block")]
    MissingToolCall,
    #[error("malformed tool call payload at byte {position}: {message}")]
    MalformedPayload { position: usize, message: String },
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("schema violation in `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("budget assignment is stale (shaped at step {assigned_step} rev {assigned_revision}, graph at step {graph_step} rev {graph_revision})")]
    StaleAssignment {
        assigned_step: u64,
        assigned_revision: u64,
        graph_step: u64,
        graph_revision: u64,
    },
    #[error("timestamp must be a non-negative number, got {0}")]
    BadTimestamp(f64),
}

fn violation(field: &str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::SchemaViolation { field: field.to_string(), reason: reason.into() }
}

/// Round half-up to one decimal place.
fn round_tenths(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Extract and validate the first tool call of a policy reply.
///
/// Accepts arbitrary bytes; invalid UTF-8 is replaced. A missing thinking block
/// and text after the closing tag are tolerated and reported as warnings.
pub fn parse_response(input: impl AsRef<[u8]>) -> Result<ParsedResponse, ProtocolError> {
    let raw = String::from_utf8_lossy(input.as_ref()).into_owned();
    let mut warnings = Vec::new();

    let first_call = raw.find(OPEN_CALL);
    let mut search_from = 0;
    let mut thinking = String::new();
    match raw.find(OPEN_THINKING) {
        Some(open) if first_call.is_none_or(|c| open < c) => {
            let body_start = open + OPEN_THINKING.len();
            match raw[body_start..].find(CLOSE_THINKING) {
                Some(len) => {
                    thinking = raw[body_start..body_start + len].trim().to_string();
                    search_from = body_start + len + CLOSE_THINKING.len();
                }
                None => warnings.push(ProtocolWarning::MissingThinking),
            }
        }
        _ => warnings.push(ProtocolWarning::MissingThinking),
    }

    let open = raw[search_from..]
        .find(OPEN_CALL)
        .map(|p| p + search_from)
        .ok_or(ProtocolError::MissingToolCall)?;
    let body_start = open + OPEN_CALL.len();
    let body_len = raw[body_start..].find(CLOSE_CALL).ok_or_else(|| ProtocolError::MalformedPayload {
        position: raw.len(),
        message: "unterminated <tool_call>".into(),
    })?;
    let body_end = body_start + body_len;
    if !raw[body_end + CLOSE_CALL.len()..].trim().is_empty() {
        tracing::warn!("ignoring text after </tool_call>");
        warnings.push(ProtocolWarning::TrailingText);
    }

    let (payload, payload_offset) = strip_fence(&raw[body_start..body_end], body_start);
    let value: Value = serde_json::from_str(payload).map_err(|e| ProtocolError::MalformedPayload {
        position: payload_offset + offset_of(payload, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(ProtocolError::MalformedPayload {
            position: payload_offset,
            message: "payload is not a JSON object".into(),
        });
    };
    let name = match obj.get("name") {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(violation("name", "expected a string")),
        None => return Err(violation("name", "missing")),
    };
    let args = match obj.get("arguments") {
        Some(Value::Object(a)) => a,
        Some(_) => return Err(violation("arguments", "expected an object")),
        None => return Err(violation("arguments", "missing")),
    };
    let action = match name {
        TOOL_SEARCH => Action::Retrieve {
            title: required_text(args, "id")?,
            parent_titles: parent_ids(args)?,
            query: required_text(args, "query")?,
        },
        TOOL_ANSWER => Action::Answer {
            parent_titles: parent_ids(args)?,
            answer: required_text(args, "answer")?,
        },
        TOOL_MEMORIZE => parse_memorize(args, &mut warnings)?,
        other => return Err(ProtocolError::UnknownTool(other.to_string())),
    };
    Ok(ParsedResponse { thinking, action, raw, warnings })
}

/// Drop a surrounding markdown code fence, returning the inner text and its
/// byte offset in the original reply.
fn strip_fence(body: &str, offset: usize) -> (&str, usize) {
    let lead = body.len() - body.trim_start().len();
    let trimmed = body.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        if let Some(inner) = rest.strip_suffix("```") {
            let nl = inner.find('\n').map_or(0, |p| p + 1);
            let tag = &inner[..nl];
            if tag.trim().chars().all(|c| c.is_ascii_alphanumeric()) {
                return (&inner[nl..], offset + lead + 3 + nl);
            }
        }
    }
    (trimmed, offset + lead)
}

fn offset_of(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn required_text(args: &Map<String, Value>, field: &str) -> Result<String, ProtocolError> {
    match args.get(field) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(violation(field, "must not be empty")),
        Some(_) => Err(violation(field, "expected a string")),
        None => Err(violation(field, "missing")),
    }
}

fn parent_ids(args: &Map<String, Value>) -> Result<Vec<String>, ProtocolError> {
    const FIELD: &str = "parent_ids";
    let value = args.get(FIELD).or_else(|| args.get("parent_id"));
    let ids = match value {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| violation(FIELD, "expected strings")))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(violation(FIELD, "expected a list of titles")),
        None => return Err(violation(FIELD, "missing")),
    };
    if ids.is_empty() {
        return Err(violation(FIELD, "at least one parent is required"));
    }
    Ok(ids)
}

fn parse_memorize(
    args: &Map<String, Value>,
    warnings: &mut Vec<ProtocolWarning>,
) -> Result<Action, ProtocolError> {
    let summary = match args.get("summarize") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(violation("summarize", "expected a string")),
        None => return Err(violation("summarize", "missing")),
    };
    let entries = match args.get("memorize") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(violation("memorize", "expected a list")),
        None => return Err(violation("memorize", "missing")),
    };
    let mut decisions = Vec::with_capacity(entries.len());
    for entry in entries {
        let Value::Object(e) = entry else {
            return Err(violation("memorize", "entries must be objects"));
        };
        let information_id = required_text(e, "information_id")?;
        let is_useful = match e.get("is_useful") {
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(violation("is_useful", "expected a boolean")),
            None => return Err(violation("is_useful", "missing")),
        };
        let raw_ts: Vec<&Value> = match e.get("key_timestamp") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(a)) => a.iter().collect(),
            Some(v @ Value::Number(_)) => vec![v],
            Some(_) => return Err(violation("key_timestamp", "expected a list of seconds")),
        };
        let mut key_timestamps_s = Vec::with_capacity(raw_ts.len());
        for v in raw_ts {
            match v.as_f64() {
                Some(t) if t.is_finite() && t >= 0.0 => key_timestamps_s.push(round_tenths(t)),
                _ => return Err(violation("key_timestamp", "seconds must be non-negative numbers")),
            }
        }
        let raw_priority = match e.get("priority_score").and_then(Value::as_f64) {
            Some(p) if p.is_finite() => p,
            Some(_) | None => return Err(violation("priority_score", "expected a number")),
        };
        let used = raw_priority.round().clamp(1.0, 5.0) as u8;
        if f64::from(used) != raw_priority {
            tracing::warn!(%information_id, raw_priority, used, "priority_score clamped");
            warnings.push(ProtocolWarning::PriorityClamped {
                information_id: information_id.clone(),
                raw: raw_priority,
                used,
            });
        }
        decisions.push(MemorizeDecision { information_id, is_useful, key_timestamps_s, priority_score: used });
    }
    Ok(Action::Memorize { summary, decisions })
}

/// Canonical reply text for `action`: sorted keys, compact JSON, timestamps
/// with one decimal.
pub fn serialize_action(action: &Action, thinking: &str) -> String {
    let payload = json!({"name": action.tool_name(), "arguments": action.arguments()});
    // `</` only occurs inside JSON strings; `<\/` keeps a closing tag in a
    // string from ending the envelope early.
    let body = canonical::value_to_string(&payload, 1).replace("</", "<\\/");
    let thinking = thinking.replace(CLOSE_THINKING, "<\\/thinking>");
    format!("{OPEN_THINKING}{thinking}{CLOSE_THINKING}{OPEN_CALL}{body}{CLOSE_CALL}")
}

/// `<12.0 seconds>`; one decimal, half-up.
pub fn format_timestamp(seconds: f64) -> Result<String, ProtocolError> {
    if !seconds.is_finite() || seconds < 0.0 {
        return Err(ProtocolError::BadTimestamp(seconds));
    }
    Ok(format!("<{:.1} seconds>", round_tenths(seconds)))
}

fn ts(seconds: f64) -> String {
    format_timestamp(seconds.max(0.0)).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub ordinal: usize,
    pub budget: u64,
    pub payload_ref: String,
}

/// Everything the policy sees on one turn: instruction, query, linearized
/// graph and the budgeted memory attachments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    pub query: String,
    pub context: LinearizedContext,
    pub memory_attachments: Vec<Attachment>,
    pub step: u64,
    pub graph_revision: u64,
}

impl PromptBundle {
    pub fn user_prompt(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Question: {}", self.query);
        let _ = write!(out, "Graph so far:\n{}", self.context);
        out.push_str("Memory attachments:\n");
        if self.memory_attachments.is_empty() {
            out.push_str("(empty)\n");
        }
        for a in &self.memory_attachments {
            let _ = writeln!(out, "#{} {} budget={}", a.ordinal, a.payload_ref, a.budget);
        }
        out
    }

    /// Characters the policy reads on an action turn.
    pub fn rendered_chars(&self) -> usize {
        self.instruction.chars().count() + self.user_prompt().chars().count()
    }

    /// SHA-256 of the canonical bundle, hex encoded.
    pub fn digest(&self) -> String {
        let text = canonical::to_string(self).expect("bundle serializes");
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Compose the prompt for the current graph. `assignment` must come from a
/// shaping pass over this exact graph state.
pub fn render_context(
    graph: &MemoryGraph,
    assignment: &BudgetAssignment,
    instruction: &str,
) -> Result<PromptBundle, ProtocolError> {
    if assignment.evaluation_step != graph.step() || assignment.graph_revision != graph.revision() {
        return Err(ProtocolError::StaleAssignment {
            assigned_step: assignment.evaluation_step,
            assigned_revision: assignment.graph_revision,
            graph_step: graph.step(),
            graph_revision: graph.revision(),
        });
    }
    let bank = graph.memory_bank();
    let memory_attachments = assignment
        .retained
        .iter()
        .filter_map(|&o| bank.get(o))
        .filter(|item| !item.dropped())
        .map(|item| Attachment {
            ordinal: item.ordinal,
            budget: assignment.budgets.get(&item.ordinal).copied().unwrap_or(0),
            payload_ref: item.payload_ref.clone(),
        })
        .collect();
    Ok(PromptBundle {
        instruction: instruction.to_string(),
        query: graph.root_query().to_string(),
        context: graph.linearize(),
        memory_attachments,
        step: graph.step(),
        graph_revision: graph.revision(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBlock {
    pub text: String,
    /// Ids the memorize reply may reference, in offer order.
    pub offered_ids: Vec<String>,
    /// `(id, asset reference)` for every visual payload the policy receives.
    pub attachments: Vec<(String, String)>,
}

pub fn render_observation(observations: &[Observation]) -> ObservationBlock {
    let mut text = String::new();
    let mut offered_ids = Vec::new();
    let mut attachments = Vec::new();
    if observations.is_empty() {
        text.push_str("(no results)\n");
    }
    for obs in observations {
        offered_ids.push(obs.id.clone());
        let _ = write!(text, "{} | source {} | score {}", obs.id, obs.source_id, canonical::format_float(obs.score, 6));
        if let Some(clip) = &obs.clip {
            let _ = write!(text, " | clip {} to {}", ts(clip.start_s), ts(clip.end_s));
        }
        text.push('\n');
        match obs.modality {
            SourceModality::Text => {
                let _ = writeln!(text, "{}", obs.content);
            }
            SourceModality::Image => {
                let _ = writeln!(text, "caption: {}", obs.content);
                attachments.push((obs.id.clone(), obs.asset_ref.clone()));
            }
            SourceModality::Video => {
                let _ = writeln!(text, "caption: {}", obs.content);
                let stamps: Vec<String> = obs.frames.iter().map(|f| ts(f.timestamp_s)).collect();
                let _ = writeln!(text, "frames: {}", stamps.join(" "));
                attachments.extend(obs.frames.iter().map(|f| (obs.id.clone(), f.frame_ref.clone())));
            }
        }
    }
    ObservationBlock { text, offered_ids, attachments }
}
