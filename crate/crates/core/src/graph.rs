//! The multimodal memory graph.
//!
//! Nodes are appended in insertion order and may only point at parents with a
//! smaller index, so index order is always a topological order and the graph
//! is acyclic by construction. Node titles are the external identifiers used
//! by the wire protocol; indices are used everywhere internally.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::energy::{VisualItem, VisualItemSeed};

/// Title of the root node.
pub const ROOT_TITLE: &str = "root";
/// Title given to the answer node (the protocol never names it).
pub const ANSWER_TITLE: &str = "answer";
/// Version tag written into persisted graph documents.
pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Root,
    Search,
    Answer,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Root => "root",
            NodeKind::Search => "search",
            NodeKind::Answer => "answer",
        }
    }
}

/// One epistemic state: parents, sub-query, summary and memory bank slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryNode {
    pub index: usize,
    pub kind: NodeKind,
    pub title: String,
    /// Sorted, duplicate-free.
    pub parent_indices: Vec<usize>,
    /// Sub-query; empty for root and answer nodes.
    pub query: String,
    pub summary: String,
    /// Ordinals into the graph's memory bank.
    pub items: Vec<usize>,
    /// Set once a search node has received its summary and items.
    pub populated: bool,
    pub created_step: u64,
    pub answer_text: Option<String>,
}

impl MemoryNode {
    pub fn is_skeletal(&self) -> bool {
        self.kind == NodeKind::Search && !self.populated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("node title must not be empty")]
    EmptyTitle,
    #[error("title `{0}` is reserved")]
    ReservedTitle(String),
    #[error("duplicate node title `{0}`")]
    DuplicateTitle(String),
    #[error("unknown parent `{0}`")]
    UnknownParent(String),
    #[error("a node needs at least one parent")]
    NoParents,
    #[error("graph is terminal: an answer node already exists")]
    GraphTerminal,
    #[error("node {0} is not a search node")]
    NotASearchNode(usize),
    #[error("node {0} is already populated")]
    AlreadyPopulated(usize),
    #[error("bad memory item reference {0}")]
    BadItemRef(usize),
    #[error("no node at index {0}")]
    BadIndex(usize),
    #[error("invalid memory item: {0}")]
    InvalidItem(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic text rendering of a graph, used as the policy's context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinearizedContext(pub String);

impl LinearizedContext {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for LinearizedContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct MemoryGraph {
    root_query: String,
    step: u64,
    nodes: Vec<MemoryNode>,
    memory_bank: Vec<VisualItem>,
    titles: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    root_query: String,
    step: u64,
    nodes: Vec<MemoryNode>,
    memory_bank: Vec<VisualItem>,
}

impl From<MemoryGraph> for RawGraph {
    fn from(g: MemoryGraph) -> Self {
        RawGraph {
            root_query: g.root_query,
            step: g.step,
            nodes: g.nodes,
            memory_bank: g.memory_bank,
        }
    }
}

impl TryFrom<RawGraph> for MemoryGraph {
    type Error = GraphError;

    fn try_from(raw: RawGraph) -> Result<Self, GraphError> {
        let mut titles = HashMap::new();
        for node in &raw.nodes {
            if titles.insert(node.title.clone(), node.index).is_some() {
                return Err(GraphError::DuplicateTitle(node.title.clone()));
            }
        }
        let graph = MemoryGraph {
            root_query: raw.root_query,
            step: raw.step,
            nodes: raw.nodes,
            memory_bank: raw.memory_bank,
            titles,
        };
        graph.validate()?;
        Ok(graph)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    schema_version: u32,
    graph: serde_json::Value,
}

impl MemoryGraph {
    pub fn new(root_query: &str) -> Result<Self, GraphError> {
        if root_query.trim().is_empty() {
            return Err(GraphError::EmptyQuery);
        }
        let root = MemoryNode {
            index: 0,
            kind: NodeKind::Root,
            title: ROOT_TITLE.to_string(),
            parent_indices: Vec::new(),
            query: String::new(),
            summary: String::new(),
            items: Vec::new(),
            populated: false,
            created_step: 0,
            answer_text: None,
        };
        let mut titles = HashMap::new();
        titles.insert(ROOT_TITLE.to_string(), 0);
        Ok(MemoryGraph {
            root_query: root_query.to_string(),
            step: 0,
            nodes: vec![root],
            memory_bank: Vec::new(),
            titles,
        })
    }

    pub fn root_query(&self) -> &str {
        &self.root_query
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn nodes(&self) -> &[MemoryNode] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> Result<&MemoryNode, GraphError> {
        self.nodes.get(index).ok_or(GraphError::BadIndex(index))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn memory_bank(&self) -> &[VisualItem] {
        &self.memory_bank
    }

    pub(crate) fn memory_bank_mut(&mut self) -> &mut [VisualItem] {
        &mut self.memory_bank
    }

    pub fn index_of(&self, title: &str) -> Option<usize> {
        self.titles.get(title).copied()
    }

    pub fn answer_index(&self) -> Option<usize> {
        self.nodes
            .iter()
            .rposition(|n| n.kind == NodeKind::Answer)
    }

    pub fn is_terminal(&self) -> bool {
        self.answer_index().is_some()
    }

    /// Mutation counter: strictly increases with every successful mutation
    /// (node creation, population, memory item insertion). Shaping passes do
    /// not count.
    pub fn revision(&self) -> u64 {
        let populated = self.nodes.iter().filter(|n| n.populated).count();
        (self.nodes.len() - 1 + populated + self.memory_bank.len()) as u64
    }

    fn resolve_parents<S: AsRef<str>>(&self, parent_titles: &[S]) -> Result<Vec<usize>, GraphError> {
        if parent_titles.is_empty() {
            return Err(GraphError::NoParents);
        }
        let mut parents = BTreeSet::new();
        for title in parent_titles {
            let title = title.as_ref();
            let idx = self
                .index_of(title)
                .ok_or_else(|| GraphError::UnknownParent(title.to_string()))?;
            parents.insert(idx);
        }
        Ok(parents.into_iter().collect())
    }

    /// Spawn a skeletal search node. Increments the step counter.
    pub fn add_search_node<S: AsRef<str>>(
        &mut self,
        title: &str,
        parent_titles: &[S],
        query: &str,
    ) -> Result<usize, GraphError> {
        if self.is_terminal() {
            return Err(GraphError::GraphTerminal);
        }
        if title.trim().is_empty() {
            return Err(GraphError::EmptyTitle);
        }
        if title == ANSWER_TITLE {
            return Err(GraphError::ReservedTitle(title.to_string()));
        }
        if self.titles.contains_key(title) {
            return Err(GraphError::DuplicateTitle(title.to_string()));
        }
        if query.trim().is_empty() {
            return Err(GraphError::EmptyQuery);
        }
        let parent_indices = self.resolve_parents(parent_titles)?;
        let index = self.nodes.len();
        self.step += 1;
        self.nodes.push(MemoryNode {
            index,
            kind: NodeKind::Search,
            title: title.to_string(),
            parent_indices,
            query: query.to_string(),
            summary: String::new(),
            items: Vec::new(),
            populated: false,
            created_step: self.step,
            answer_text: None,
        });
        self.titles.insert(title.to_string(), index);
        debug_assert!(self.validate().is_ok());
        Ok(index)
    }

    /// Append a memory item owned by a skeletal search node; returns its ordinal.
    pub fn add_item(&mut self, owner: usize, seed: VisualItemSeed) -> Result<usize, GraphError> {
        if self.is_terminal() {
            return Err(GraphError::GraphTerminal);
        }
        let node = self.node(owner)?;
        if node.kind != NodeKind::Search {
            return Err(GraphError::NotASearchNode(owner));
        }
        if node.populated {
            return Err(GraphError::AlreadyPopulated(owner));
        }
        if !(1..=5).contains(&seed.priority) {
            return Err(GraphError::InvalidItem(format!(
                "priority {} outside 1..=5",
                seed.priority
            )));
        }
        if let Some(ts) = seed.source_timestamp_s {
            if !ts.is_finite() || ts < 0.0 {
                return Err(GraphError::InvalidItem(format!("timestamp {ts}")));
            }
        }
        let ordinal = self.memory_bank.len();
        let slot = self
            .memory_bank
            .iter()
            .filter(|item| item.owner_node == owner)
            .count();
        self.memory_bank.push(VisualItem::from_seed(ordinal, owner, slot, seed));
        Ok(ordinal)
    }

    /// Fill a skeletal search node with its summary and the items it owns.
    ///
    /// `item_refs` must name exactly the items previously added for this node.
    pub fn populate_node(
        &mut self,
        index: usize,
        summary: &str,
        item_refs: &[usize],
    ) -> Result<(), GraphError> {
        if self.is_terminal() {
            return Err(GraphError::GraphTerminal);
        }
        let node = self.node(index)?;
        if node.kind != NodeKind::Search {
            return Err(GraphError::NotASearchNode(index));
        }
        if node.populated {
            return Err(GraphError::AlreadyPopulated(index));
        }
        let mut seen = HashSet::new();
        for &r in item_refs {
            let item = self.memory_bank.get(r).ok_or(GraphError::BadItemRef(r))?;
            if item.owner_node != index || !seen.insert(r) {
                return Err(GraphError::BadItemRef(r));
            }
        }
        if let Some(orphan) = self
            .memory_bank
            .iter()
            .find(|item| item.owner_node == index && !seen.contains(&item.ordinal))
        {
            return Err(GraphError::BadItemRef(orphan.ordinal));
        }
        let mut items = item_refs.to_vec();
        items.sort_unstable();
        let node = &mut self.nodes[index];
        node.summary = summary.to_string();
        node.items = items;
        node.populated = true;
        Ok(())
    }

    /// Append the answer node; afterwards the graph rejects every mutation.
    pub fn add_answer_node<S: AsRef<str>>(
        &mut self,
        parent_titles: &[S],
        answer: &str,
    ) -> Result<usize, GraphError> {
        if self.is_terminal() {
            return Err(GraphError::GraphTerminal);
        }
        let parent_indices = self.resolve_parents(parent_titles)?;
        let index = self.nodes.len();
        self.nodes.push(MemoryNode {
            index,
            kind: NodeKind::Answer,
            title: ANSWER_TITLE.to_string(),
            parent_indices,
            query: String::new(),
            summary: String::new(),
            items: Vec::new(),
            populated: false,
            created_step: self.step,
            answer_text: Some(answer.to_string()),
        });
        self.titles.insert(ANSWER_TITLE.to_string(), index);
        debug_assert!(self.validate().is_ok());
        Ok(index)
    }

    /// Child lists, one per node, each in ascending index order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.nodes.len()];
        for node in &self.nodes {
            for &p in &node.parent_indices {
                children[p].push(node.index);
            }
        }
        children
    }

    pub fn out_degree(&self, index: usize) -> Result<usize, GraphError> {
        self.node(index)?;
        Ok(self
            .nodes
            .iter()
            .filter(|n| n.parent_indices.contains(&index))
            .count())
    }

    /// Every node with a directed path to the answer node, answer included.
    /// Empty while the graph has no answer.
    pub fn critical_path(&self) -> BTreeSet<usize> {
        let mut path = BTreeSet::new();
        let Some(answer) = self.answer_index() else {
            return path;
        };
        let mut queue = VecDeque::from([answer]);
        path.insert(answer);
        while let Some(i) = queue.pop_front() {
            for &p in &self.nodes[i].parent_indices {
                if path.insert(p) {
                    queue.push_back(p);
                }
            }
        }
        path
    }

    /// Number of search nodes whose normalized query repeats an earlier one.
    pub fn duplicate_query_count(&self) -> usize {
        let mut seen = HashSet::new();
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Search)
            .filter(|n| !seen.insert(normalize_query(&n.query)))
            .count()
    }

    pub fn linearize(&self) -> LinearizedContext {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "graph step={} nodes={} items={}",
            self.step,
            self.nodes.len(),
            self.memory_bank.len()
        );
        for node in &self.nodes {
            let _ = write!(out, "[{}] {} {}", node.index, node.kind.as_str(), quote(&node.title));
            if !node.parent_indices.is_empty() {
                let parents: Vec<String> = node
                    .parent_indices
                    .iter()
                    .map(|&p| quote(&self.nodes[p].title))
                    .collect();
                let _ = write!(out, " parents=[{}]", parents.join(","));
            }
            let _ = write!(out, " step={}", node.created_step);
            match node.kind {
                NodeKind::Search if node.populated => out.push_str(" populated"),
                NodeKind::Search => out.push_str(" skeletal"),
                _ => {}
            }
            out.push('\n');
            match node.kind {
                NodeKind::Root => {
                    let _ = writeln!(out, "  query: {}", quote(&self.root_query));
                }
                NodeKind::Search => {
                    let _ = writeln!(out, "  query: {}", quote(&node.query));
                    if node.populated {
                        let _ = writeln!(out, "  summary: {}", quote(&node.summary));
                    }
                    for &ordinal in &node.items {
                        let item = &self.memory_bank[ordinal];
                        let _ = write!(
                            out,
                            "  item #{} slot={} {} ref={}",
                            item.ordinal,
                            item.slot,
                            item.modality.as_str(),
                            quote(&item.payload_ref)
                        );
                        if let Some(ts) = item.source_timestamp_s {
                            let _ = write!(out, " ts={}", canonical::format_float(ts, canonical::PERSIST_DECIMALS));
                        }
                        let _ = write!(
                            out,
                            " priority={} saliency={}",
                            item.priority,
                            u8::from(item.saliency)
                        );
                        match item.dropped_at_step {
                            Some(at) => {
                                let _ = write!(out, " dropped@{at}");
                            }
                            None => {
                                let _ = write!(out, " budget={}", item.allocated_budget);
                            }
                        }
                        out.push('\n');
                    }
                }
                NodeKind::Answer => {
                    let _ = writeln!(
                        out,
                        "  answer: {}",
                        quote(node.answer_text.as_deref().unwrap_or(""))
                    );
                }
            }
        }
        LinearizedContext(out)
    }

    /// Check every structural invariant; run after loading.
    pub fn validate(&self) -> Result<(), GraphError> {
        let invalid = |msg: String| Err(GraphError::Invalid(msg));
        if self.root_query.trim().is_empty() {
            return Err(GraphError::EmptyQuery);
        }
        let Some(root) = self.nodes.first() else {
            return invalid("graph has no root".into());
        };
        if root.kind != NodeKind::Root || root.title != ROOT_TITLE {
            return invalid("node 0 must be the root".into());
        }
        let mut answer_seen = false;
        let mut owned: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for item in &self.memory_bank {
            if item.owner_node >= self.nodes.len() {
                return invalid(format!("item {} owned by missing node", item.ordinal));
            }
            owned[item.owner_node].push(item.ordinal);
        }
        for (pos, node) in self.nodes.iter().enumerate() {
            if node.index != pos {
                return invalid(format!("node at position {pos} has index {}", node.index));
            }
            if answer_seen {
                return invalid("nodes after the answer node".into());
            }
            if node.created_step > self.step {
                return invalid(format!("node {pos} created after current step"));
            }
            if self.titles.get(&node.title) != Some(&pos) {
                return invalid(format!("title index out of sync at node {pos}"));
            }
            if node.parent_indices.windows(2).any(|w| w[0] >= w[1]) {
                return invalid(format!("node {pos} parents not a sorted set"));
            }
            if node.parent_indices.iter().any(|&p| p >= pos) {
                return invalid(format!("node {pos} has a parent with index >= its own"));
            }
            match node.kind {
                NodeKind::Root => {
                    if pos != 0 || !node.parent_indices.is_empty() {
                        return invalid("root must be unique, first and parentless".into());
                    }
                }
                NodeKind::Search | NodeKind::Answer => {
                    if node.parent_indices.is_empty() {
                        return invalid(format!("node {pos} has no parents"));
                    }
                }
            }
            if node.kind == NodeKind::Answer {
                answer_seen = true;
                if node.answer_text.is_none() {
                    return invalid("answer node without answer text".into());
                }
            } else if node.answer_text.is_some() {
                return invalid(format!("node {pos} carries answer text"));
            }
            if node.kind == NodeKind::Search {
                if node.query.trim().is_empty() {
                    return invalid(format!("search node {pos} has empty query"));
                }
                if !node.populated && (!node.summary.is_empty() || !node.items.is_empty()) {
                    return invalid(format!("skeletal node {pos} carries content"));
                }
                if node.populated && node.items != owned[pos] {
                    return invalid(format!("node {pos} item list does not match memory bank"));
                }
            } else if node.populated || !node.items.is_empty() || !owned[pos].is_empty() {
                return invalid(format!("non-search node {pos} carries memory"));
            }
        }
        for (ordinal, item) in self.memory_bank.iter().enumerate() {
            if item.ordinal != ordinal {
                return invalid(format!("memory item at {ordinal} has ordinal {}", item.ordinal));
            }
            if item.slot != owned[item.owner_node].iter().position(|&o| o == ordinal).unwrap_or(usize::MAX) {
                return invalid(format!("memory item {ordinal} has inconsistent slot"));
            }
            if !(1..=5).contains(&item.priority) {
                return invalid(format!("memory item {ordinal} priority out of range"));
            }
            if item.dropped_at_step.is_some() && item.allocated_budget != 0 {
                return invalid(format!("dropped memory item {ordinal} holds budget"));
            }
        }
        Ok(())
    }

    /// Canonical, schema-versioned JSON document.
    pub fn to_canonical_json(&self) -> String {
        let doc = serde_json::json!({
            "schema_version": GRAPH_SCHEMA_VERSION,
            "graph": self,
        });
        canonical::value_to_string(&doc, canonical::PERSIST_DECIMALS)
    }

    pub fn from_json(text: &str) -> Result<Self, PersistError> {
        let doc: GraphDocument = serde_json::from_str(text)?;
        if doc.schema_version != GRAPH_SCHEMA_VERSION {
            return Err(PersistError::SchemaVersion {
                found: doc.schema_version,
                expected: GRAPH_SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(doc.graph)?)
    }
}

/// Case-fold, trim and collapse internal whitespace.
pub fn normalize_query(query: &str) -> String {
    query
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string escaping")
}
